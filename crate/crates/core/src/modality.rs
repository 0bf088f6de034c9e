//! Per-modality feature matrices, the observation mask, and cosine relevance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"GMC1";
const FEATURE_VERSION: u32 = 1;

/// Stand-in for negative infinity. Strictly below any achievable mean of cosines.
pub const NEG_INF_RELEVANCE: f64 = -1e30;

/// Dense row-major feature matrix for a single modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimMismatch {
                left: data.len(),
                right: rows * dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite feature at row {}, col {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(Error::Format("feature file: bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("feature file: unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// All modalities for a shared item index space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStore {
    names: Vec<String>,
    features: Vec<FeatureMatrix>,
}

impl ModalityStore {
    pub fn new(named: Vec<(String, FeatureMatrix)>) -> Result<Self> {
        if named.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let rows = named[0].1.rows();
        for (_, f) in &named {
            if f.rows() != rows {
                return Err(Error::DimMismatch {
                    left: f.rows(),
                    right: rows,
                });
            }
        }
        let (names, features) = named.into_iter().unzip();
        Ok(Self { names, features })
    }

    pub fn n_items(&self) -> usize {
        self.features[0].rows()
    }

    pub fn n_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn name(&self, m: usize) -> &str {
        &self.names[m]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self, m: usize) -> usize {
        self.features[m].dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.dim()).collect()
    }

    pub fn features(&self, m: usize) -> &FeatureMatrix {
        &self.features[m]
    }

    pub fn row(&self, m: usize, i: usize) -> &[f32] {
        self.features[m].row(i)
    }
}

/// Read access to an item x modality observation indicator.
pub trait Observation: Sync {
    fn n_items(&self) -> usize;
    fn n_modalities(&self) -> usize;
    fn is_observed(&self, item: usize, modality: usize) -> bool;

    fn observed_modalities(&self, item: usize) -> Vec<usize> {
        (0..self.n_modalities())
            .filter(|&m| self.is_observed(item, m))
            .collect()
    }
}

/// Item x modality observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMask {
    n_items: usize,
    n_modalities: usize,
    observed: Vec<bool>,
    seed: Option<u64>,
    rate: f64,
}

impl Observation for ModalityMask {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn n_modalities(&self) -> usize {
        self.n_modalities
    }

    fn is_observed(&self, item: usize, modality: usize) -> bool {
        self.observed[item * self.n_modalities + modality]
    }
}

impl ModalityMask {
    pub fn all_observed(n_items: usize, n_modalities: usize) -> Self {
        Self {
            n_items,
            n_modalities,
            observed: vec![true; n_items * n_modalities],
            seed: None,
            rate: 0.0,
        }
    }

    /// Builds a mask from explicit rows. Every row must keep one observed modality.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n_modalities = rows.first().map_or(0, |r| r.len());
        let mut observed = Vec::with_capacity(rows.len() * n_modalities);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_modalities {
                return Err(Error::DimMismatch {
                    left: r.len(),
                    right: n_modalities,
                });
            }
            if !r.iter().any(|&o| o) {
                return Err(Error::NoObservedModality(i));
            }
            observed.extend_from_slice(r);
        }
        let masked = observed.iter().filter(|&&o| !o).count();
        let rate = if observed.is_empty() {
            0.0
        } else {
            masked as f64 / observed.len() as f64
        };
        Ok(Self {
            n_items: rows.len(),
            n_modalities,
            observed,
            seed: None,
            rate,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn masked_slots(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    /// Items with every modality observed.
    pub fn full_items(&self) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| (0..self.n_modalities).all(|m| self.is_observed(i, m)))
            .collect()
    }

    /// Same mask with one extra slot hidden.
    pub fn hiding(&self, item: usize, modality: usize) -> HiddenSlot<'_> {
        HiddenSlot {
            base: self,
            item,
            modality,
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "item_id,modality,observed")?;
        for i in 0..self.n_items {
            for m in 0..self.n_modalities {
                writeln!(w, "{},{},{}", i, m, u8::from(self.is_observed(i, m)))?;
            }
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead, source: &str) -> Result<Self> {
        let mut cells: Vec<(usize, usize, bool)> = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let err = |msg: &str| Error::Parse {
                path: source.to_string(),
                line: idx + 1,
                msg: msg.to_string(),
            };
            if idx == 0 {
                if line != "item_id,modality,observed" {
                    return Err(err("expected header item_id,modality,observed"));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(err("expected three columns"));
            }
            let item = cols[0].parse().map_err(|_| err("bad item_id"))?;
            let modality = cols[1].parse().map_err(|_| err("bad modality"))?;
            let observed = match cols[2] {
                "0" => false,
                "1" => true,
                _ => return Err(err("observed must be 0 or 1")),
            };
            cells.push((item, modality, observed));
        }
        let n_items = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let n_modalities = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut rows = vec![vec![true; n_modalities]; n_items];
        for (i, m, o) in cells {
            rows[i][m] = o;
        }
        Self::from_rows(&rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?), &path.display().to_string())
    }
}

/// A mask view with one additional slot hidden.
#[derive(Debug, Clone, Copy)]
pub struct HiddenSlot<'a> {
    base: &'a ModalityMask,
    item: usize,
    modality: usize,
}

impl Observation for HiddenSlot<'_> {
    fn n_items(&self) -> usize {
        self.base.n_items
    }

    fn n_modalities(&self) -> usize {
        self.base.n_modalities
    }

    fn is_observed(&self, item: usize, modality: usize) -> bool {
        if item == self.item && modality == self.modality {
            false
        } else {
            self.base.is_observed(item, modality)
        }
    }
}

/// Masks `round(rate * n_items * n_modalities)` slots uniformly at random while
/// keeping at least one observed modality per item.
pub fn apply_masking(n_items: usize, n_modalities: usize, rate: f64, seed: u64) -> Result<ModalityMask> {
    if n_modalities == 0 {
        return Err(Error::Config("at least one modality is required".into()));
    }
    let max_rate = (n_modalities - 1) as f64 / n_modalities as f64;
    if !(0.0..=max_rate + 1e-12).contains(&rate) {
        return Err(Error::Infeasible(format!(
            "rate {rate} outside [0, {max_rate}] for {n_modalities} modalities"
        )));
    }
    let total = n_items * n_modalities;
    let target = ((rate * total as f64).round() as usize).min(n_items * (n_modalities - 1));
    let mut slots: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);

    let mut observed = vec![true; total];
    let mut remaining = vec![n_modalities; n_items];
    let mut masked = 0;
    for slot in slots {
        if masked == target {
            break;
        }
        let item = slot / n_modalities;
        if remaining[item] > 1 {
            observed[slot] = false;
            remaining[item] -= 1;
            masked += 1;
        }
    }
    debug_assert_eq!(masked, target);
    Ok(ModalityMask {
        n_items,
        n_modalities,
        observed,
        seed: Some(seed),
        rate,
    })
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_iter(a.iter().copied().zip(b.iter().copied())))
}

pub(crate) fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    cosine_iter(a.iter().zip(b).map(|(&x, &y)| (x as f64, y as f64)))
}

fn cosine_iter(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Relevance of a node to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relevance {
    Score(f64),
    /// No modality is observed by both nodes.
    Unrelated,
}

impl Relevance {
    pub fn value(self) -> f64 {
        match self {
            Relevance::Score(v) => v,
            Relevance::Unrelated => NEG_INF_RELEVANCE,
        }
    }

    pub fn score(self) -> Option<f64> {
        match self {
            Relevance::Score(v) => Some(v),
            Relevance::Unrelated => None,
        }
    }
}

/// Mean cosine over the modalities observed at both `i` and `v`.
pub fn relevance(store: &ModalityStore, obs: &(impl Observation + ?Sized), i: usize, v: usize) -> Relevance {
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in 0..store.n_modalities() {
        if obs.is_observed(i, m) && obs.is_observed(v, m) {
            sum += cosine_f32(store.row(m, i), store.row(m, v));
            count += 1;
        }
    }
    if count == 0 {
        Relevance::Unrelated
    } else {
        Relevance::Score(sum / count as f64)
    }
}

/// Mean relevance of `nodes` to `i`, counting unrelated members at
/// [`NEG_INF_RELEVANCE`]: `(sum of scores + unrelated * sentinel) / |nodes|`.
pub fn mean_relevance(
    store: &ModalityStore,
    obs: &(impl Observation + ?Sized),
    i: usize,
    nodes: &[usize],
) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = 0.0;
    let mut unrelated = 0usize;
    for &v in nodes {
        match relevance(store, obs, i, v) {
            Relevance::Score(r) => sum += r,
            Relevance::Unrelated => unrelated += 1,
        }
    }
    Ok((sum + unrelated as f64 * NEG_INF_RELEVANCE) / nodes.len() as f64)
}
