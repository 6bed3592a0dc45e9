use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tree::FlatTree;
use super::{GbdtModel, GbdtParams};
use crate::error::{Error, Result};

const FORMAT: &str = "strata-gbdt";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    params: GbdtParams,
    feature_names: Vec<String>,
    trees: Vec<FlatTree>,
}

impl GbdtModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            params: self.params.clone(),
            feature_names: self.feature_names.clone(),
            trees: self
                .trees
                .iter()
                .map(|t| FlatTree::from_tree(t, self.has_cover))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::SchemaMismatch(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        let has_cover = file.trees.iter().all(|t| t.cover.is_some());
        let n = file.feature_names.len();
        let trees = file
            .trees
            .iter()
            .map(|t| t.to_tree(n))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(Error::SchemaMismatch)?;
        Ok(GbdtModel {
            params: file.params,
            feature_names: file.feature_names,
            trees,
            has_cover,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
