//! Synthetic concept world: a stand-in for an embedding dataset and encoder.
//!
//! Concepts live on a smooth manifold: a low-dimensional latent pushed
//! through a fixed random linear map and normalized onto the sphere. Held-out
//! concepts lie on the same manifold as training ones, so a smooth predictor
//! can reach them without having seen them. Text samples are noisy copies of
//! the concept center; image samples are the same noisy copies seen through a
//! fixed near-identity rotation, modeling a shared embedding space with a
//! small modality gap (gap 0 makes the two modalities bitwise identical).

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine, cosine_distance, pearson, quantile_sorted, Tensor};

/// Distance of the latent anchor from the origin (ball radius is 1).
const LATENT_ANCHOR_RADIUS: f64 = 1.75;
/// A minority of concepts sit on a stretched radius, giving the cloud the
/// heavy-tailed difficulty structure embedding datasets show.
const LATENT_OUTLIER_PROB: f64 = 0.3;
const LATENT_OUTLIER_SCALE: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub sample_noise: f64,
    /// Per-plane rotation angle (radians) of the text -> image map.
    pub modality_gap: f64,
    pub seed: u64,
    pub split_fracs: (f64, f64),
    pub source_pool_size: usize,
    /// Cap on cosine(source row, any concept center); rows above it are
    /// rejected so the pool stays concept-free.
    pub source_cos_cap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            embed_dim: 32,
            latent_dim: 4,
            n_concepts: 96,
            samples_per_concept: 32,
            sample_noise: 0.05,
            modality_gap: 0.1,
            seed: 7,
            split_fracs: (0.8, 0.2),
            source_pool_size: 64,
            source_cos_cap: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim >= self.embed_dim {
            return Err(Error::InvalidConfig("latent_dim must be < embed_dim".into()));
        }
        if self.n_concepts < 2 {
            return Err(Error::InvalidConfig("need at least 2 concepts".into()));
        }
        if self.samples_per_concept < 1 {
            return Err(Error::InvalidConfig("samples_per_concept must be >= 1".into()));
        }
        if self.sample_noise < 0.0 || self.modality_gap < 0.0 {
            return Err(Error::InvalidConfig("noise and gap must be >= 0".into()));
        }
        let (tr, te) = self.split_fracs;
        if tr <= 0.0 || te < 0.0 || (tr + te - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        if self.source_pool_size < 1 {
            return Err(Error::InvalidConfig("source pool must be non-empty".into()));
        }
        Ok(())
    }
}

/// One concept: its latent coordinate, center, per-modality samples, split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: usize,
    pub latent: Tensor,
    /// Unit-norm concept center.
    pub center: Tensor,
    pub samples_text: Tensor,
    pub samples_image: Tensor,
    pub split: Split,
}

/// Generic samples that carry none of the concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePool {
    pub samples: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub concepts: Vec<ConceptSpec>,
    pub source: SourcePool,
}

impl World {
    pub fn concepts_in(&self, split: Split) -> Vec<&ConceptSpec> {
        self.concepts.iter().filter(|c| c.split == split).collect()
    }

    pub fn concept(&self, id: usize) -> Result<&ConceptSpec> {
        self.concepts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no concept with id {id}")))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Build the world deterministically from its config.
pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let seed = cfg.seed;

    // Fixed random latent-to-embedding map.
    let mut map_rng = rng::stream(seed, &[1]);
    let a_map: Vec<Vec<f64>> = (0..cfg.embed_dim)
        .map(|_| {
            (0..cfg.latent_dim)
                .map(|_| map_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    // Latents are a unit ball around a fixed off-origin anchor. A ball
    // centered at the origin would make the center cloud antipodally
    // symmetric after normalization, collapsing every concept's mean
    // distance to the rest of the cloud to the same value; the anchor gives
    // the cloud the cone structure real embedding spaces have.
    let anchor = {
        let dir: Vec<f64> = (0..cfg.latent_dim)
            .map(|_| map_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        Tensor::vector(dir.into_iter().map(|x| x / norm * LATENT_ANCHOR_RADIUS).collect())
    };

    let rotation = plane_rotation(cfg.embed_dim, cfg.modality_gap);

    let mut concepts = Vec::with_capacity(cfg.n_concepts);
    for id in 0..cfg.n_concepts {
        let mut c_rng = rng::stream(seed, &[2, id as u64]);
        let mut offset = unit_ball_point(cfg.latent_dim, &mut c_rng);
        if c_rng.random_range(0.0..1.0) < LATENT_OUTLIER_PROB {
            offset = offset.scale_val(LATENT_OUTLIER_SCALE);
        }
        let latent = offset.add_val(&anchor)?;
        let raw: Vec<f64> = a_map
            .iter()
            .map(|row| row.iter().zip(latent.data()).map(|(a, z)| a * z).sum())
            .collect();
        let center = normalize(Tensor::vector(raw))?;

        let image_center = match &rotation {
            Some(r) => rotate(r, &center),
            None => center.clone(),
        };

        let mut text_rows = Vec::with_capacity(cfg.samples_per_concept * cfg.embed_dim);
        let mut image_rows = Vec::with_capacity(cfg.samples_per_concept * cfg.embed_dim);
        for _ in 0..cfg.samples_per_concept {
            let noise: Vec<f64> = (0..cfg.embed_dim)
                .map(|_| c_rng.sample::<f64, _>(StandardNormal) * cfg.sample_noise)
                .collect();
            // The same noise draw feeds both modalities: with gap 0 the
            // image samples equal the text samples exactly.
            let text = normalize(Tensor::vector(
                center
                    .data()
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + n)
                    .collect(),
            ))?;
            let image = normalize(Tensor::vector(
                image_center
                    .data()
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + n)
                    .collect(),
            ))?;
            text_rows.extend_from_slice(text.data());
            image_rows.extend_from_slice(image.data());
        }
        concepts.push(ConceptSpec {
            id,
            latent,
            center,
            samples_text: Tensor::matrix(cfg.samples_per_concept, cfg.embed_dim, text_rows)?,
            samples_image: Tensor::matrix(cfg.samples_per_concept, cfg.embed_dim, image_rows)?,
            split: Split::Train, // assigned below
        });
    }

    assign_splits(cfg, &mut concepts);
    let source = build_source_pool(cfg, &concepts)?;

    Ok(World {
        config: cfg.clone(),
        concepts,
        source,
    })
}

/// Stratify the train/test split by latent-space octant: the sign pattern of
/// the first three latent coordinates relative to their per-coordinate
/// median, so both splits cover the same regions of the manifold.
fn assign_splits(cfg: &WorldConfig, concepts: &mut [ConceptSpec]) {
    let k = cfg.latent_dim.min(3);
    let medians: Vec<f64> = (0..k)
        .map(|i| {
            let mut vals: Vec<f64> = concepts.iter().map(|c| c.latent.data()[i]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            crate::tensor::quantile_sorted(&vals, 0.5)
        })
        .collect();
    let octant_of = |latent: &Tensor| -> usize {
        (0..k)
            .map(|i| if latent.data()[i] >= medians[i] { 1 << i } else { 0 })
            .sum()
    };
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); 8];
    for (idx, c) in concepts.iter().enumerate() {
        groups[octant_of(&c.latent)].push(idx);
    }
    let mut split_rng = rng::stream(cfg.seed, &[3]);
    for group in groups.iter_mut() {
        group.shuffle(&mut split_rng);
        let n_train = (group.len() as f64 * cfg.split_fracs.0).round() as usize;
        for (j, &idx) in group.iter().enumerate() {
            concepts[idx].split = if j < n_train { Split::Train } else { Split::Test };
        }
    }
    // Rounding on small octants can starve a split; repair to 2 per split
    // where the concept count allows it.
    let want = if concepts.len() >= 4 { 2 } else { 1 };
    for split in [Split::Test, Split::Train] {
        let other = if split == Split::Test { Split::Train } else { Split::Test };
        loop {
            let have = concepts.iter().filter(|c| c.split == split).count();
            let donor = concepts.iter().filter(|c| c.split == other).count();
            if have >= want || donor <= want {
                break;
            }
            if let Some(c) = concepts.iter_mut().rev().find(|c| c.split == other) {
                c.split = split;
            }
        }
    }
}

fn build_source_pool(cfg: &WorldConfig, concepts: &[ConceptSpec]) -> Result<SourcePool> {
    let mut pool_rng = rng::stream(cfg.seed, &[4]);
    let mut rows = Vec::with_capacity(cfg.source_pool_size * cfg.embed_dim);
    let mut kept = 0;
    let mut attempts = 0;
    while kept < cfg.source_pool_size {
        attempts += 1;
        if attempts > 10_000 * cfg.source_pool_size {
            return Err(Error::Degenerate(
                "source pool rejection sampling exhausted; cos cap too tight".into(),
            ));
        }
        let cand = normalize(Tensor::vector(
            (0..cfg.embed_dim)
                .map(|_| pool_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ))?;
        let worst = concepts
            .iter()
            .map(|c| cosine(cand.data(), c.center.data()).unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        if worst < cfg.source_cos_cap {
            rows.extend_from_slice(cand.data());
            kept += 1;
        }
    }
    Ok(SourcePool {
        samples: Tensor::matrix(cfg.source_pool_size, cfg.embed_dim, rows)?,
    })
}

fn unit_ball_point(dim: usize, r: &mut impl Rng) -> Tensor {
    let dir: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let radius: f64 = r.random_range(0.0..1.0f64).powf(1.0 / dim as f64);
    Tensor::vector(dir.into_iter().map(|x| x / norm * radius).collect())
}

fn normalize(t: Tensor) -> Result<Tensor> {
    let n = t.norm();
    if n < 1e-12 {
        return Err(Error::Degenerate("zero-norm vector".into()));
    }
    Ok(t.map(|x| x / n))
}

/// Orthogonal near-identity map built from disjoint coordinate-plane
/// rotations, each by `angle` radians. `None` means exactly the identity.
fn plane_rotation(dim: usize, angle: f64) -> Option<Vec<(usize, usize, f64, f64)>> {
    if angle == 0.0 {
        return None;
    }
    let (c, s) = (angle.cos(), angle.sin());
    Some((0..dim / 2).map(|k| (2 * k, 2 * k + 1, c, s)).collect())
}

fn rotate(planes: &[(usize, usize, f64, f64)], v: &Tensor) -> Tensor {
    let mut out = v.clone();
    for &(i, j, c, s) in planes {
        let (a, b) = (out.data()[i], out.data()[j]);
        out.data_mut()[i] = c * a - s * b;
        out.data_mut()[j] = s * a + c * b;
    }
    out
}

/// How a set of samples is condensed into one conditioning embedding.
#[derive(Debug, Clone, Copy)]
pub enum EncodeMode {
    /// Unit-normalized mean of all rows.
    Average,
    /// A single selected row.
    Single(usize),
}

/// Condense sample rows into one unit-norm conditioning embedding.
pub fn encode(samples: &Tensor, mode: EncodeMode) -> Result<Tensor> {
    if samples.shape().len() != 2 || samples.rows() == 0 {
        return Err(Error::Degenerate("encode needs a non-empty [n, d] matrix".into()));
    }
    match mode {
        EncodeMode::Average => normalize(Tensor::vector(samples.col_means())),
        EncodeMode::Single(i) => {
            if i >= samples.rows() {
                return Err(Error::InvalidConfig(format!(
                    "sample index {i} out of range ({} rows)",
                    samples.rows()
                )));
            }
            normalize(Tensor::vector(samples.row(i).to_vec()))
        }
    }
}

/// Per-concept pairwise-distance summaries and the test-concept difficulty
/// proxies derived from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptDistances {
    pub id: usize,
    pub split: Split,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DifficultyEntry {
    pub id: usize,
    /// Mean cosine distance to all training-concept embeddings.
    pub mean_dist: f64,
    /// Distance to the closest training concept.
    pub min_dist: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_concept: Vec<ConceptDistances>,
    /// (split, median of q25s, median of q50s, median of q75s).
    pub split_medians: Vec<(Split, f64, f64, f64)>,
    pub difficulty: Vec<DifficultyEntry>,
    /// Correlation between the mean-distance and min-distance difficulty
    /// proxies over test concepts.
    pub pearson_mean_min: f64,
}

/// Pairwise cosine-distance structure between concept embeddings (the
/// unit-normalized mean of each concept's text samples), quantile summaries
/// per concept, and mean/min difficulty proxies for test concepts.
pub fn concept_distance_stats(concepts: &[ConceptSpec]) -> Result<DistanceReport> {
    for split in [Split::Train, Split::Test] {
        if concepts.iter().filter(|c| c.split == split).count() < 2 {
            return Err(Error::Degenerate(format!(
                "need >= 2 concepts in split {split:?}"
            )));
        }
    }
    let embeddings: Vec<Tensor> = concepts
        .iter()
        .map(|c| encode(&c.samples_text, EncodeMode::Average))
        .collect::<Result<_>>()?;

    let n = concepts.len();
    let mut per_concept = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| cosine_distance(embeddings[i].data(), embeddings[j].data()))
            .collect::<Result<_>>()?;
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        per_concept.push(ConceptDistances {
            id: concepts[i].id,
            split: concepts[i].split,
            q25: quantile_sorted(&dists, 0.25),
            q50: quantile_sorted(&dists, 0.50),
            q75: quantile_sorted(&dists, 0.75),
        });
    }

    let mut split_medians = Vec::new();
    for split in [Split::Train, Split::Test] {
        let median_of = |f: &dyn Fn(&ConceptDistances) -> f64| -> f64 {
            let mut v: Vec<f64> = per_concept
                .iter()
                .filter(|c| c.split == split)
                .map(|c| f(c))
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            quantile_sorted(&v, 0.5)
        };
        split_medians.push((
            split,
            median_of(&|c| c.q25),
            median_of(&|c| c.q50),
            median_of(&|c| c.q75),
        ));
    }

    let train_idx: Vec<usize> = (0..n).filter(|&i| concepts[i].split == Split::Train).collect();
    let mut difficulty = Vec::new();
    for i in 0..n {
        if concepts[i].split != Split::Test {
            continue;
        }
        let dists: Vec<f64> = train_idx
            .iter()
            .map(|&j| cosine_distance(embeddings[i].data(), embeddings[j].data()))
            .collect::<Result<_>>()?;
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let min = dists.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        difficulty.push(DifficultyEntry {
            id: concepts[i].id,
            mean_dist: mean,
            min_dist: min,
        });
    }
    let means: Vec<f64> = difficulty.iter().map(|d| d.mean_dist).collect();
    let mins: Vec<f64> = difficulty.iter().map(|d| d.min_dist).collect();
    let pearson_mean_min = pearson(&means, &mins)?;

    Ok(DistanceReport {
        per_concept,
        split_medians,
        difficulty,
        pearson_mean_min,
    })
}
