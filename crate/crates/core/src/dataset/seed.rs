//! Seed records and their CSV schemas.
//!
//! * `esci.csv`: `query,product_id,title,description,brand,esci_label,locale`
//!   with `esci_label` one of `E`, `S`, `C`, `I`.
//! * `reviews.csv`: `product_title,review_text,rating,helpful_votes` with
//!   `rating` in 1..=5.
//! * `sessions.csv`: `clicked_titles,purchased_title` where the clicked
//!   titles are in click order, separated by `||`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;

pub const CLICK_SEPARATOR: &str = "||";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EsciLabel {
    E,
    S,
    C,
    I,
}

impl EsciLabel {
    /// Lower is more relevant.
    pub fn priority(self) -> u8 {
        match self {
            EsciLabel::E => 0,
            EsciLabel::S => 1,
            EsciLabel::C => 2,
            EsciLabel::I => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EsciLabel::E => "Exact",
            EsciLabel::S => "Substitute",
            EsciLabel::C => "Complement",
            EsciLabel::I => "Irrelevant",
        }
    }

    pub const ALL: [EsciLabel; 4] = [EsciLabel::E, EsciLabel::S, EsciLabel::C, EsciLabel::I];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsciRow {
    pub query: String,
    pub product_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub brand: String,
    pub esci_label: EsciLabel,
    #[serde(default)]
    pub locale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRow {
    pub product_title: String,
    pub review_text: String,
    pub rating: u8,
    #[serde(default)]
    pub helpful_votes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRow {
    pub clicked_titles: Vec<String>,
    pub purchased_title: String,
}

#[derive(Debug, Deserialize)]
struct SessionCsv {
    clicked_titles: String,
    purchased_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeedRecord {
    Esci(EsciRow),
    Review(ReviewRow),
    Session(SessionRow),
}

impl SeedRecord {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            SeedRecord::Esci(r) => r.validate(),
            SeedRecord::Review(r) => r.validate(),
            SeedRecord::Session(r) => r.validate(),
        }
    }
}

pub trait Validate {
    fn validate(&self) -> Result<(), String>;
}

impl Validate for EsciRow {
    fn validate(&self) -> Result<(), String> {
        if self.query.trim().is_empty() {
            return Err("empty query".into());
        }
        if self.title.trim().is_empty() {
            return Err("empty title".into());
        }
        Ok(())
    }
}

impl Validate for ReviewRow {
    fn validate(&self) -> Result<(), String> {
        if self.product_title.trim().is_empty() {
            return Err("empty product title".into());
        }
        if !(1..=5).contains(&self.rating) {
            return Err(format!("rating {} outside 1..5", self.rating));
        }
        Ok(())
    }
}

impl Validate for SessionRow {
    fn validate(&self) -> Result<(), String> {
        if self.purchased_title.trim().is_empty() {
            return Err("empty purchased title".into());
        }
        if self.clicked_titles.iter().any(|t| t.is_empty()) {
            return Err("empty clicked title".into());
        }
        Ok(())
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize().enumerate() {
        // line 1 is the header
        out.push((i + 2, rec.map_err(csv_err)?));
    }
    Ok(out)
}

fn checked<T: Validate>(path: &Path, rows: Vec<(usize, T)>) -> Result<Vec<T>, DatasetError> {
    rows.into_iter()
        .map(|(line, row)| {
            row.validate().map_err(|reason| DatasetError::InvalidRecord {
                path: path.display().to_string(),
                line,
                reason,
            })?;
            Ok(row)
        })
        .collect()
}

pub fn load_esci(path: impl AsRef<Path>) -> Result<Vec<EsciRow>, DatasetError> {
    let path = path.as_ref();
    checked(path, read_csv(path)?)
}

pub fn load_reviews(path: impl AsRef<Path>) -> Result<Vec<ReviewRow>, DatasetError> {
    let path = path.as_ref();
    checked(path, read_csv(path)?)
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<SessionRow>, DatasetError> {
    let path = path.as_ref();
    let rows = read_csv::<SessionCsv>(path)?
        .into_iter()
        .map(|(line, r)| {
            let clicked_titles = r
                .clicked_titles
                .split(CLICK_SEPARATOR)
                .map(|t| t.trim().to_string())
                .collect();
            let row = SessionRow {
                clicked_titles,
                purchased_title: r.purchased_title.trim().to_string(),
            };
            (line, row)
        })
        .collect();
    checked(path, rows)
}
