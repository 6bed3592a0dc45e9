//! OMOP-lite data model: participants plus dated coded events, loaded from
//! two CSV files and indexed per person in date order.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonId(pub u64);

impl fmt::Display for PersonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
    OtherUnknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::OtherUnknown => "other_unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "male" => Some(Sex::Male),
            "female" => Some(Sex::Female),
            "other_unknown" => Some(Sex::OtherUnknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Condition,
    Procedure,
    Medication,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Condition, Domain::Procedure, Domain::Medication];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Condition => "condition",
            Domain::Procedure => "procedure",
            Domain::Medication => "medication",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "condition" => Some(Domain::Condition),
            "procedure" => Some(Domain::Procedure),
            "medication" => Some(Domain::Medication),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub person_id: PersonId,
    pub sex_at_birth: Sex,
    pub birth_date: NaiveDate,
    pub race: String,
    pub ethnicity: String,
}

/// One row of `events.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalEvent {
    pub person_id: PersonId,
    pub concept_code: String,
    pub domain: Domain,
    pub event_date: NaiveDate,
}

/// Interned concept handle, valid for the store that issued it.
pub type ConceptId = u32;

/// A stored event; the owning person is implied by the per-person list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub concept: ConceptId,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub code: String,
    pub domain: Domain,
}

/// Immutable participant and event tables.
#[derive(Debug, Clone)]
pub struct EventStore {
    participants: Vec<Participant>,
    index: HashMap<PersonId, usize>,
    events: Vec<Vec<Event>>,
    concepts: Vec<Concept>,
    concept_index: HashMap<String, ConceptId>,
}

#[derive(Default)]
pub struct EventStoreBuilder {
    participants: Vec<Participant>,
    index: HashMap<PersonId, usize>,
    events: Vec<Vec<Event>>,
    concepts: Vec<Concept>,
    concept_index: HashMap<String, ConceptId>,
}

impl EventStoreBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_participant(&mut self, participant: Participant) -> Result<()> {
        if self.index.contains_key(&participant.person_id) {
            return Err(Error::DuplicatePerson(participant.person_id));
        }
        self.index
            .insert(participant.person_id, self.participants.len());
        self.participants.push(participant);
        self.events.push(Vec::new());
        Ok(())
    }

    fn intern(&mut self, code: &str, domain: Domain) -> std::result::Result<ConceptId, String> {
        if let Some(&id) = self.concept_index.get(code) {
            let known = self.concepts[id as usize].domain;
            if known != domain {
                return Err(format!(
                    "concept {code} recorded as {domain} but previously as {known}"
                ));
            }
            return Ok(id);
        }
        let id = self.concepts.len() as ConceptId;
        self.concepts.push(Concept {
            code: code.to_string(),
            domain,
        });
        self.concept_index.insert(code.to_string(), id);
        Ok(id)
    }

    pub fn add_event(&mut self, event: &ClinicalEvent) -> Result<()> {
        self.push_event(event, 0)
    }

    fn push_event(&mut self, event: &ClinicalEvent, line: u64) -> Result<()> {
        let slot = *self
            .index
            .get(&event.person_id)
            .ok_or(Error::UnknownPersonRef {
                person_id: event.person_id,
                line,
            })?;
        let concept = self
            .intern(&event.concept_code, event.domain)
            .map_err(Error::InvalidArgument)?;
        if event.event_date < self.participants[slot].birth_date {
            return Err(Error::InvalidArgument(format!(
                "event on {} precedes birth date of person {}",
                event.event_date, event.person_id
            )));
        }
        self.events[slot].push(Event {
            concept,
            date: event.event_date,
        });
        Ok(())
    }

    pub fn build(mut self) -> EventStore {
        for list in &mut self.events {
            // stable: same-day events keep input order
            list.sort_by_key(|e| e.date);
        }
        EventStore {
            participants: self.participants,
            index: self.index,
            events: self.events,
            concepts: self.concepts,
            concept_index: self.concept_index,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ParticipantRow {
    person_id: String,
    sex_at_birth: String,
    birth_date: String,
    race: String,
    ethnicity: String,
}

#[derive(Debug, Deserialize)]
struct EventRow {
    person_id: String,
    concept_code: String,
    domain: String,
    event_date: String,
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(reader: &mut csv::Reader<std::fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub const PARTICIPANTS_HEADER: [&str; 5] = ["person_id", "sex_at_birth", "birth_date", "race", "ethnicity"];
pub const EVENTS_HEADER: [&str; 4] = ["person_id", "concept_code", "domain", "event_date"];

/// Loads `participants.csv` and `events.csv`.
pub fn load_store(participants_path: &Path, events_path: &Path) -> Result<EventStore> {
    let mut builder = EventStoreBuilder::new();

    let mut reader = csv_reader(participants_path)?;
    check_header(&mut reader, participants_path, &PARTICIPANTS_HEADER)?;
    for record in reader.records() {
        let record = record.map_err(|e| malformed_csv(participants_path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::MalformedRow {
            path: participants_path.to_path_buf(),
            line,
            message,
        };
        let row: ParticipantRow = record.deserialize(None).map_err(|e| bad(e.to_string()))?;
        let person_id = parse_person_id(&row.person_id).ok_or_else(|| bad(format!("bad person_id {:?}", row.person_id)))?;
        let sex_at_birth = Sex::parse(row.sex_at_birth.trim())
            .ok_or_else(|| bad(format!("unknown sex_at_birth {:?}", row.sex_at_birth)))?;
        let birth_date = parse_date(&row.birth_date)
            .ok_or_else(|| bad(format!("unparseable date {:?}", row.birth_date)))?;
        builder
            .add_participant(Participant {
                person_id,
                sex_at_birth,
                birth_date,
                race: row.race,
                ethnicity: row.ethnicity,
            })
            .map_err(|e| bad(e.to_string()))?;
    }

    let mut reader = csv_reader(events_path)?;
    check_header(&mut reader, events_path, &EVENTS_HEADER)?;
    for record in reader.records() {
        let record = record.map_err(|e| malformed_csv(events_path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::MalformedRow {
            path: events_path.to_path_buf(),
            line,
            message,
        };
        let row: EventRow = record.deserialize(None).map_err(|e| bad(e.to_string()))?;
        let person_id = parse_person_id(&row.person_id).ok_or_else(|| bad(format!("bad person_id {:?}", row.person_id)))?;
        let domain = Domain::parse(row.domain.trim())
            .ok_or_else(|| bad(format!("unknown domain {:?}", row.domain)))?;
        let event_date = parse_date(&row.event_date)
            .ok_or_else(|| bad(format!("unparseable date {:?}", row.event_date)))?;
        let event = ClinicalEvent {
            person_id,
            concept_code: row.concept_code,
            domain,
            event_date,
        };
        match builder.push_event(&event, line) {
            Ok(()) => {}
            Err(e @ Error::UnknownPersonRef { .. }) => return Err(e),
            Err(e) => return Err(bad(e.to_string())),
        }
    }
    Ok(builder.build())
}

fn parse_person_id(s: &str) -> Option<PersonId> {
    s.trim().parse().ok().map(PersonId)
}

fn malformed_csv(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

impl EventStore {
    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn participant(&self, id: PersonId) -> Result<&Participant> {
        self.index
            .get(&id)
            .map(|&i| &self.participants[i])
            .ok_or(Error::UnknownPerson(id))
    }

    pub fn contains(&self, id: PersonId) -> bool {
        self.index.contains_key(&id)
    }

    /// All events of a person, ascending by date.
    pub fn events(&self, id: PersonId) -> Result<&[Event]> {
        self.index
            .get(&id)
            .map(|&i| self.events[i].as_slice())
            .ok_or(Error::UnknownPerson(id))
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: ConceptId) -> &Concept {
        &self.concepts[id as usize]
    }

    pub fn concept_id(&self, code: &str) -> Option<ConceptId> {
        self.concept_index.get(code).copied()
    }

    /// Events with `end_date - window_days < event_date <= end_date`.
    pub fn events_in_window(&self, id: PersonId, end_date: NaiveDate, window_days: u32) -> Result<&[Event]> {
        if window_days == 0 {
            return Err(Error::InvalidArgument("window_days must be positive".into()));
        }
        let events = self.events(id)?;
        let hi = events.partition_point(|e| e.date <= end_date);
        let lo = match end_date.checked_sub_days(Days::new(window_days as u64)) {
            Some(start) => events[..hi].partition_point(|e| e.date <= start),
            None => 0,
        };
        Ok(&events[lo..hi])
    }

    /// Row-level view of a person's events, in stored order.
    pub fn clinical_events(&self, id: PersonId) -> Result<Vec<ClinicalEvent>> {
        Ok(self
            .events(id)?
            .iter()
            .map(|e| {
                let c = self.concept(e.concept);
                ClinicalEvent {
                    person_id: id,
                    concept_code: c.code.clone(),
                    domain: c.domain,
                    event_date: e.date,
                }
            })
            .collect())
    }

    /// Writes both CSV files, participants in load order and events grouped
    /// per person in date order.
    pub fn write_csv(&self, participants_path: &Path, events_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(participants_path)?;
        w.write_record(PARTICIPANTS_HEADER)?;
        for p in &self.participants {
            w.write_record([
                p.person_id.to_string().as_str(),
                p.sex_at_birth.as_str(),
                &p.birth_date.format(DATE_FORMAT).to_string(),
                &p.race,
                &p.ethnicity,
            ])?;
        }
        w.flush().map_err(|e| Error::io(participants_path, e))?;

        let mut w = csv::Writer::from_path(events_path)?;
        w.write_record(EVENTS_HEADER)?;
        for (p, events) in self.participants.iter().zip(&self.events) {
            let id = p.person_id.to_string();
            for e in events {
                let c = self.concept(e.concept);
                w.write_record([
                    id.as_str(),
                    &c.code,
                    c.domain.as_str(),
                    &e.date.format(DATE_FORMAT).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(events_path, e))?;
        Ok(())
    }
}

/// Whole years elapsed from `birth` to `on`.
pub fn age_in_years(birth: NaiveDate, on: NaiveDate) -> i32 {
    on.years_since(birth).map_or_else(
        || -(birth.years_since(on).unwrap_or(0) as i32),
        |y| y as i32,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        path
    }

    const PEOPLE: &str = "person_id,sex_at_birth,birth_date,race,ethnicity\n\
        1,female,1970-05-01,white,not_hispanic\n\
        2,male,1985-01-31,black,hispanic\n";

    #[test]
    fn loads_valid_pair() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", PEOPLE);
        let e = write(
            dir.path(),
            "e.csv",
            "person_id,concept_code,domain,event_date\n\
             1,C1,condition,2020-01-01\n\
             2,P1,procedure,2021-03-04\n\
             1,M1,medication,2019-12-01\n",
        );
        let store = load_store(&p, &e).unwrap();
        assert_eq!(store.participants().len(), 2);
        assert_eq!(store.n_events(), 3);
        let ev = store.events(PersonId(1)).unwrap();
        assert_eq!(ev[0].date, d("2019-12-01"));
        assert_eq!(store.concept(ev[0].concept).domain, Domain::Medication);
    }

    #[test]
    fn missing_person_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", PEOPLE);
        let e = write(
            dir.path(),
            "e.csv",
            "person_id,concept_code,domain,event_date\n1,C1,condition,2020-01-01\n42,C1,condition,2020-01-01\n",
        );
        match load_store(&p, &e) {
            Err(Error::UnknownPersonRef { person_id, line }) => {
                assert_eq!(person_id, PersonId(42));
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", PEOPLE);
        for (body, needle) in [
            ("person_id,concept_code,domain,event_date\n1,C1,lab,2020-01-01\n", "unknown domain"),
            ("person_id,concept_code,domain,event_date\n1,C1,condition,2020-13-01\n", "unparseable date"),
            ("person_id,concept_code,domain,event_date\n1,C1,condition\n", ""),
        ] {
            let e = write(dir.path(), "e.csv", body);
            match load_store(&p, &e) {
                Err(Error::MalformedRow { line, message, .. }) => {
                    assert_eq!(line, 2);
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", "id,sex\n1,male\n");
        let e = write(dir.path(), "e.csv", "person_id,concept_code,domain,event_date\n");
        assert!(matches!(load_store(&p, &e), Err(Error::MalformedRow { line: 1, .. })));
    }

    fn tiny_store(dates: &[(&str, &str)]) -> EventStore {
        let mut b = EventStoreBuilder::new();
        b.add_participant(Participant {
            person_id: PersonId(1),
            sex_at_birth: Sex::Female,
            birth_date: d("1950-01-01"),
            race: "r".into(),
            ethnicity: "e".into(),
        })
        .unwrap();
        for (code, date) in dates {
            b.add_event(&ClinicalEvent {
                person_id: PersonId(1),
                concept_code: code.to_string(),
                domain: Domain::Condition,
                event_date: d(date),
            })
            .unwrap();
        }
        b.build()
    }

    #[test]
    fn window_boundaries() {
        let store = tiny_store(&[("A", "2020-01-01"), ("B", "2021-12-31"), ("C", "2022-01-01")]);
        let end = d("2022-01-01");
        // 2022-01-01 - 730 days = 2020-01-01 -> excluded, end date itself included
        let got = store.events_in_window(PersonId(1), end, 730).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].date, end);
        assert!(store.events_in_window(PersonId(9), end, 730).is_err());
        assert!(store.events_in_window(PersonId(1), end, 0).is_err());
    }

    #[test]
    fn window_matches_brute_force_filter() {
        let dates = ["2017-05-05", "2019-02-01", "2020-06-30", "2021-08-08", "2022-02-01"];
        let store = tiny_store(&dates.iter().map(|x| ("A", *x)).collect::<Vec<_>>());
        let end = d("2021-12-31");
        let got = store.events_in_window(PersonId(1), end, 730).unwrap();
        let expected: Vec<NaiveDate> = dates
            .iter()
            .map(|s| d(s))
            .filter(|&x| (end - x).num_days() < 730 && x <= end)
            .collect();
        assert_eq!(expected.len(), 2);
        assert_eq!(got.iter().map(|e| e.date).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn csv_round_trip_normalizes_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", PEOPLE);
        let e = write(
            dir.path(),
            "e.csv",
            "person_id,concept_code,domain,event_date\n2,P1,procedure,2021-03-04\n1,C1,condition,2020-01-01\n1,C1,condition,2020-01-01\n1,M1,medication,2019-12-01\n",
        );
        let store = load_store(&p, &e).unwrap();
        let (p2, e2) = (dir.path().join("p2.csv"), dir.path().join("e2.csv"));
        store.write_csv(&p2, &e2).unwrap();
        let again = load_store(&p2, &e2).unwrap();
        assert_eq!(again.participants(), store.participants());
        for p in store.participants() {
            assert_eq!(
                again.clinical_events(p.person_id).unwrap(),
                store.clinical_events(p.person_id).unwrap()
            );
        }
        // duplicate rows are kept
        assert_eq!(again.n_events(), 4);
    }

    #[test]
    fn age_whole_years() {
        assert_eq!(age_in_years(d("1980-06-15"), d("2020-06-14")), 39);
        assert_eq!(age_in_years(d("1980-06-15"), d("2020-06-15")), 40);
    }

    proptest! {
        #[test]
        fn shuffled_input_is_date_sorted(offsets in proptest::collection::vec(0u64..5000, 0..40)) {
            let base = d("2010-01-01");
            let dates: Vec<String> = offsets
                .iter()
                .map(|&o| (base + Days::new(o)).format(DATE_FORMAT).to_string())
                .collect();
            let store = tiny_store(&dates.iter().map(|x| ("A", x.as_str())).collect::<Vec<_>>());
            let mut expected: Vec<NaiveDate> = dates.iter().map(|s| d(s)).collect();
            expected.sort();
            let got: Vec<NaiveDate> = store.events(PersonId(1)).unwrap().iter().map(|e| e.date).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn nested_windows_nest(offsets in proptest::collection::vec(0u64..3000, 1..30), w1 in 1u32..1500, extra in 0u32..1500) {
            let base = d("2012-01-01");
            let dates: Vec<String> = offsets
                .iter()
                .map(|&o| (base + Days::new(o)).format(DATE_FORMAT).to_string())
                .collect();
            let store = tiny_store(&dates.iter().map(|x| ("A", x.as_str())).collect::<Vec<_>>());
            let end = d("2019-01-01");
            let small = store.events_in_window(PersonId(1), end, w1).unwrap();
            let large = store.events_in_window(PersonId(1), end, w1 + extra).unwrap();
            prop_assert!(small.len() <= large.len());
            // both are suffixes of the same sorted prefix
            prop_assert_eq!(small, &large[large.len() - small.len()..]);
            let all = store.events_in_window(PersonId(1), end, u32::MAX).unwrap();
            let upto = store.events(PersonId(1)).unwrap().iter().filter(|e| e.date <= end).count();
            prop_assert_eq!(all.len(), upto);
        }
    }
}
