//! Star ratings: records, per-(exam, segmentation) aggregates and exam-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volume::Axis;

pub const MIN_STARS: u8 = 1;
pub const MAX_STARS: u8 = 6;

/// Header of the ratings CSV.
pub const RATINGS_HEADER: [&str; 5] = ["exam_id", "seg_id", "view", "rater_id", "stars"];

#[derive(Debug, thiserror::Error)]
pub enum RatingsError {
    #[error("no ratings for exam '{exam_id}', segmentation '{seg_id}'")]
    EmptyGroup { exam_id: String, seg_id: String },
    #[error("stars must be in 1..=6, got {0}")]
    InvalidStars(i64),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("ratings file {path}: {message}")]
    Csv { path: String, message: String },
    #[error("ratings file not found: {0}")]
    NotFound(String),
}

pub type Result<T, E = RatingsError> = std::result::Result<T, E>;

/// One rater's judgment of one view of one segmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingRecord {
    pub exam_id: String,
    pub seg_id: String,
    pub view: Axis,
    pub rater_id: String,
    pub stars: u8,
}

impl RatingRecord {
    pub fn new(
        exam_id: impl Into<String>,
        seg_id: impl Into<String>,
        view: Axis,
        rater_id: impl Into<String>,
        stars: i64,
    ) -> Result<Self> {
        if !(MIN_STARS as i64..=MAX_STARS as i64).contains(&stars) {
            return Err(RatingsError::InvalidStars(stars));
        }
        Ok(Self {
            exam_id: exam_id.into(),
            seg_id: seg_id.into(),
            view,
            rater_id: rater_id.into(),
            stars: stars as u8,
        })
    }

    pub fn key(&self) -> SegKey {
        SegKey::new(&self.exam_id, &self.seg_id)
    }
}

/// Identity of one candidate segmentation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SegKey {
    pub exam_id: String,
    pub seg_id: String,
}

impl SegKey {
    pub fn new(exam_id: &str, seg_id: &str) -> Self {
        Self {
            exam_id: exam_id.to_string(),
            seg_id: seg_id.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean_stars: f64,
    pub min_stars: u8,
    pub max_stars: u8,
    pub count: usize,
}

impl Aggregate {
    fn from_stars(stars: impl Iterator<Item = u8>) -> Option<Self> {
        let mut sum = 0u64;
        let mut count = 0usize;
        let mut min = u8::MAX;
        let mut max = u8::MIN;
        for s in stars {
            sum += s as u64;
            count += 1;
            min = min.min(s);
            max = max.max(s);
        }
        (count > 0).then(|| Self {
            mean_stars: sum as f64 / count as f64,
            min_stars: min,
            max_stars: max,
            count,
        })
    }
}

/// Aggregates every key present, pooling views and raters.
pub fn aggregate(records: &[RatingRecord]) -> BTreeMap<SegKey, Aggregate> {
    let mut grouped: BTreeMap<SegKey, Vec<u8>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.key()).or_default().push(r.stars);
    }
    grouped
        .into_iter()
        .map(|(k, stars)| {
            let agg = Aggregate::from_stars(stars.into_iter()).expect("nonempty group");
            (k, agg)
        })
        .collect()
}

/// Aggregate for a single key.
pub fn aggregate_key(records: &[RatingRecord], key: &SegKey) -> Result<Aggregate> {
    Aggregate::from_stars(
        records
            .iter()
            .filter(|r| r.exam_id == key.exam_id && r.seg_id == key.seg_id)
            .map(|r| r.stars),
    )
    .ok_or_else(|| RatingsError::EmptyGroup {
        exam_id: key.exam_id.clone(),
        seg_id: key.seg_id.clone(),
    })
}

/// Records plus their aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingSet {
    pub records: Vec<RatingRecord>,
    pub aggregates: BTreeMap<SegKey, Aggregate>,
}

impl RatingSet {
    pub fn new(records: Vec<RatingRecord>) -> Self {
        let aggregates = aggregate(&records);
        Self {
            records,
            aggregates,
        }
    }

    pub fn exam_ids(&self) -> Vec<String> {
        self.aggregates
            .keys()
            .map(|k| k.exam_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn get(&self, key: &SegKey) -> Result<Aggregate> {
        self.aggregates
            .get(key)
            .copied()
            .ok_or_else(|| RatingsError::EmptyGroup {
                exam_id: key.exam_id.clone(),
                seg_id: key.seg_id.clone(),
            })
    }
}

/// Splits unique exam ids into (train, test); both sides sorted.
///
/// The train side holds `round(fraction * n)` exams.
pub fn split_dataset(
    exam_ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(RatingsError::InvalidFraction(train_fraction));
    }
    let mut unique: Vec<String> = exam_ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_train = (train_fraction * unique.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let mut test = unique.split_off(n_train);
    unique.sort();
    test.sort();
    Ok((unique, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    exam_id: String,
    seg_id: String,
    #[serde(default)]
    view: String,
    rater_id: String,
    stars: i64,
}

fn csv_err(path: &Path, message: impl std::fmt::Display) -> RatingsError {
    RatingsError::Csv {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Reads a ratings CSV; an empty view means axial.
pub fn read_csv(path: &Path) -> Result<Vec<RatingRecord>> {
    if !path.exists() {
        return Err(RatingsError::NotFound(path.display().to_string()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != RATINGS_HEADER {
        return Err(csv_err(
            path,
            format!("expected header {}", RATINGS_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let view = if row.view.trim().is_empty() {
            Axis::Axial
        } else {
            row.view
                .parse()
                .map_err(|e| csv_err(path, format!("row {}: {e}", line + 2)))?
        };
        out.push(
            RatingRecord::new(row.exam_id, row.seg_id, view, row.rater_id, row.stars)
                .map_err(|e| csv_err(path, format!("row {}: {e}", line + 2)))?,
        );
    }
    Ok(out)
}

pub fn to_csv_string(records: &[RatingRecord]) -> String {
    let mut out = RATINGS_HEADER.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.exam_id, r.seg_id, r.view, r.rater_id, r.stars
        ));
    }
    out
}

pub fn write_csv(path: &Path, records: &[RatingRecord]) -> std::io::Result<()> {
    crate::io::write_atomic(path, to_csv_string(records).as_bytes())
}
