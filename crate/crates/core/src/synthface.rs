//! Procedural synthetic face dataset.
//!
//! Each identity is a 16-dimensional latent vector. A fixed random two-layer
//! generator maps the latent to a 16x16 grayscale "face"; eight binary
//! attributes are derived deterministically from the latent and rendered
//! into the image as localised brightness blobs, so attribute information is
//! genuinely present in pixels (a linear probe can recover it). Per-sample
//! noise models capture variation.
//!
//! Everything is a pure function of `(dataset seed, identity index,
//! variation index)`, so datasets never need to be shipped — they are
//! regenerated bit-identically from the seed.

use thiserror::Error;

use crate::rng::{self, seeded_rng, standard_normal, stream, uniform};
use crate::tensor::Tensor;

pub const IMG_SIDE: usize = 16;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;
pub const LATENT_DIM: usize = 16;
pub const N_ATTRS: usize = 8;
/// Fraction of identities assigned to the training split (by index order).
pub const TRAIN_FRACTION: f64 = 0.8;

const GEN_HIDDEN: usize = 32;
/// Amplitude of the identity-specific signal around the mid-gray base level.
/// Kept moderate so identity is carried by many small pixel differences
/// rather than a few saturated ones.
const IDENTITY_GAIN: f64 = 0.22;
/// Strength of the attribute blobs. Deliberately larger than typical
/// perturbation budgets so attribute appearance cannot be fully rewritten by
/// a small-norm attack; attribute classifiers retain a persistent signal.
const BLOB_GAIN: f64 = 0.22;
/// Gaussian radius (in pixels) of an attribute blob.
const BLOB_SIGMA: f64 = 2.0;
/// Standard deviation of the per-sample pixel noise.
const NOISE_GAIN: f64 = 0.05;
/// Blob centres (row, col) for the eight attributes: a 3x3 grid with the
/// middle cell skipped, so each attribute has its own image region.
const BLOB_CENTERS: [(usize, usize); N_ATTRS] = [
    (3, 3),
    (3, 8),
    (3, 13),
    (8, 3),
    (8, 13),
    (13, 3),
    (13, 8),
    (13, 13),
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset needs at least 2 identities, got {0}")]
    TooFewIdentities(usize),
    #[error("dataset needs at least 1 sample per identity, got {0}")]
    NoSamples(usize),
    #[error("latent must have {expected} dims, got {got}")]
    BadLatent { expected: usize, got: usize },
    #[error("pair sampling needs {need} but pool '{pool}' offers {have}")]
    PoolTooSmall {
        need: &'static str,
        pool: &'static str,
        have: usize,
    },
    #[error("cannot sample genuine pairs with {0} sample(s) per identity")]
    NoGenuineVariation(usize),
    #[error("sample_pairs: requested {0} pairs, need at least 1")]
    NoPairsRequested(usize),
}

/// Seeds and sizes that fully determine a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_identities: usize,
    pub samples_per_identity: usize,
}

#[derive(Debug, Clone)]
pub struct Identity {
    pub id_index: usize,
    pub latent: Vec<f64>,
    pub attributes: [u8; N_ATTRS],
}

#[derive(Debug, Clone)]
pub struct FaceSample {
    /// Index into `Dataset::samples` (identity-major order).
    pub sample_index: usize,
    pub id_index: usize,
    pub variation: usize,
    /// `[16, 16]` grayscale image with values in `[0, 1]`.
    pub image: Tensor,
    pub attributes: [u8; N_ATTRS],
}

/// The fixed latent-to-image network plus the noise stream root.
pub struct Generator {
    dataset_seed: u64,
    w1: Vec<f64>, // [GEN_HIDDEN, LATENT_DIM]
    b1: Vec<f64>,
    w2: Vec<f64>, // [IMG_PIXELS, GEN_HIDDEN]
    b2: Vec<f64>,
}

impl Generator {
    pub fn new(dataset_seed: u64) -> Self {
        let mut rng = seeded_rng(&[dataset_seed, stream::GENERATOR]);
        let mut draw = |n: usize, sd: f64| -> Vec<f64> {
            (0..n).map(|_| sd * standard_normal(&mut rng)).collect()
        };
        Generator {
            dataset_seed,
            w1: draw(GEN_HIDDEN * LATENT_DIM, 0.25),
            b1: draw(GEN_HIDDEN, 0.1),
            w2: draw(IMG_PIXELS * GEN_HIDDEN, 0.53),
            b2: draw(IMG_PIXELS, 0.5),
        }
    }

    /// Renders one sample: `clamp01(0.5 + 0.22 * G(latent) +
    /// 0.35 * blobs(attributes) + 0.05 * noise(identity, variation))` where
    /// `G` maps the latent through the fixed two-layer network with a `tanh`
    /// output squash and `blobs` is the signed attribute field.
    pub fn render(&self, identity: &Identity, variation: usize) -> Result<Tensor, DataError> {
        if identity.latent.len() != LATENT_DIM {
            return Err(DataError::BadLatent {
                expected: LATENT_DIM,
                got: identity.latent.len(),
            });
        }
        let mut hidden = [0.0; GEN_HIDDEN];
        for (h, hv) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..LATENT_DIM {
                acc += self.w1[h * LATENT_DIM + k] * identity.latent[k];
            }
            *hv = (acc + self.b1[h]).tanh();
        }
        let mut noise_rng = seeded_rng(&[
            self.dataset_seed,
            stream::NOISE,
            identity.id_index as u64,
            variation as u64,
        ]);
        let mut px = vec![0.0; IMG_PIXELS];
        for (i, p) in px.iter_mut().enumerate() {
            let mut acc = 0.0;
            for h in 0..GEN_HIDDEN {
                acc += self.w2[i * GEN_HIDDEN + h] * hidden[h];
            }
            let base = 0.5 + IDENTITY_GAIN * (acc + self.b2[i]).tanh();
            let blob = blob_field(i, &identity.attributes);
            let noisy = base + BLOB_GAIN * blob + NOISE_GAIN * standard_normal(&mut noise_rng);
            *p = clamp01(noisy);
        }
        Ok(Tensor::from_vec(vec![IMG_SIDE, IMG_SIDE], px).expect("pixel count matches shape"))
    }
}

#[inline]
fn clamp01(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else if v > 1.0 {
        1.0
    } else {
        v
    }
}

/// Signed sum of attribute blobs at pixel `i`: an active attribute brightens
/// its region, an inactive one darkens it, so the two states are maximally
/// separated in pixel space.
fn blob_field(i: usize, attributes: &[u8; N_ATTRS]) -> f64 {
    let (r, c) = (i / IMG_SIDE, i % IMG_SIDE);
    let mut acc = 0.0;
    for (j, &(br, bc)) in BLOB_CENTERS.iter().enumerate() {
        let sign = if attributes[j] == 1 { 1.0 } else { -1.0 };
        let dr = r as f64 - br as f64;
        let dc = c as f64 - bc as f64;
        acc += sign * (-(dr * dr + dc * dc) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
    }
    acc
}

/// Binary attributes from a latent: attribute `j` fires when
/// `latent[2j] + 0.5 * latent[2j+1] > 0`, tying each attribute to its own
/// latent coordinates (and hence to identity).
pub fn derive_attributes(latent: &[f64]) -> Result<[u8; N_ATTRS], DataError> {
    if latent.len() != LATENT_DIM {
        return Err(DataError::BadLatent {
            expected: LATENT_DIM,
            got: latent.len(),
        });
    }
    let mut attrs = [0u8; N_ATTRS];
    for (j, a) in attrs.iter_mut().enumerate() {
        *a = u8::from(latent[2 * j] + 0.5 * latent[2 * j + 1] > 0.0);
    }
    Ok(attrs)
}

#[derive(Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub identities: Vec<Identity>,
    /// Identity-major: sample `id * samples_per_identity + variation`.
    pub samples: Vec<FaceSample>,
    pub n_train_identities: usize,
}

impl Dataset {
    /// Generates the full dataset from a spec. Identity latents are uniform
    /// in `[-1, 1]`; the first `floor(0.8 * n)` identities form the training
    /// split and the rest are held out for calibration and attacks.
    pub fn generate(spec: DatasetSpec) -> Result<Dataset, DataError> {
        if spec.n_identities < 2 {
            return Err(DataError::TooFewIdentities(spec.n_identities));
        }
        if spec.samples_per_identity < 1 {
            return Err(DataError::NoSamples(spec.samples_per_identity));
        }
        let generator = Generator::new(spec.seed);
        let mut identities = Vec::with_capacity(spec.n_identities);
        for id_index in 0..spec.n_identities {
            let mut rng = seeded_rng(&[spec.seed, stream::LATENT, id_index as u64]);
            let latent: Vec<f64> = (0..LATENT_DIM).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let attributes = derive_attributes(&latent)?;
            identities.push(Identity {
                id_index,
                latent,
                attributes,
            });
        }
        let mut samples = Vec::with_capacity(spec.n_identities * spec.samples_per_identity);
        for identity in &identities {
            for variation in 0..spec.samples_per_identity {
                let image = generator.render(identity, variation)?;
                samples.push(FaceSample {
                    sample_index: samples.len(),
                    id_index: identity.id_index,
                    variation,
                    image,
                    attributes: identity.attributes,
                });
            }
        }
        let n_train_identities = (TRAIN_FRACTION * spec.n_identities as f64).floor() as usize;
        Ok(Dataset {
            spec,
            identities,
            samples,
            n_train_identities,
        })
    }

    pub fn n_heldout_identities(&self) -> usize {
        self.spec.n_identities - self.n_train_identities
    }

    pub fn is_train_identity(&self, id_index: usize) -> bool {
        id_index < self.n_train_identities
    }

    pub fn sample_at(&self, id_index: usize, variation: usize) -> &FaceSample {
        &self.samples[id_index * self.spec.samples_per_identity + variation]
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &FaceSample> {
        self.samples.iter().filter(|s| self.is_train_identity(s.id_index))
    }

    pub fn heldout_samples(&self) -> impl Iterator<Item = &FaceSample> {
        self.samples.iter().filter(|s| !self.is_train_identity(s.id_index))
    }

    fn pool_identities(&self, pool: IdentityPool) -> Vec<usize> {
        match pool {
            IdentityPool::Train => (0..self.n_train_identities).collect(),
            IdentityPool::Heldout => (self.n_train_identities..self.spec.n_identities).collect(),
            IdentityPool::All => (0..self.spec.n_identities).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Two different variations of the same identity.
    Genuine,
    /// Samples of two different identities (attacker, victim).
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityPool {
    Train,
    Heldout,
    All,
}

impl IdentityPool {
    fn name(self) -> &'static str {
        match self {
            IdentityPool::Train => "train",
            IdentityPool::Heldout => "heldout",
            IdentityPool::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FacePair {
    /// Sample index of the attacker (or first) image.
    pub attacker: usize,
    /// Sample index of the victim (or second) image.
    pub victim: usize,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub kind: PairKind,
    pub pool: IdentityPool,
    pub seed: u64,
    pub pairs: Vec<FacePair>,
}

/// Draws `n` pairs of the requested kind from the identity pool. Sampling is
/// with replacement across pairs and fully determined by `seed`.
pub fn sample_pairs(
    dataset: &Dataset,
    kind: PairKind,
    pool: IdentityPool,
    n: usize,
    seed: u64,
) -> Result<PairSet, DataError> {
    if n == 0 {
        return Err(DataError::NoPairsRequested(n));
    }
    let ids = dataset.pool_identities(pool);
    let spi = dataset.spec.samples_per_identity;
    match kind {
        PairKind::Impostor if ids.len() < 2 => {
            return Err(DataError::PoolTooSmall {
                need: "2 identities",
                pool: pool.name(),
                have: ids.len(),
            });
        }
        PairKind::Genuine if spi < 2 => {
            return Err(DataError::NoGenuineVariation(spi));
        }
        _ => {}
    }
    let kind_tag = match kind {
        PairKind::Genuine => 1,
        PairKind::Impostor => 2,
    };
    let pool_tag = match pool {
        IdentityPool::Train => 1,
        IdentityPool::Heldout => 2,
        IdentityPool::All => 3,
    };
    let mut rng = seeded_rng(&[seed, stream::PAIRS, kind_tag, pool_tag]);
    let mut draw = |m: usize| -> usize { (rng::uniform01(&mut rng) * m as f64) as usize % m };
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        match kind {
            PairKind::Genuine => {
                let id = ids[draw(ids.len())];
                let va = draw(spi);
                let vb = loop {
                    let v = draw(spi);
                    if v != va {
                        break v;
                    }
                };
                pairs.push(FacePair {
                    attacker: dataset.sample_at(id, va).sample_index,
                    victim: dataset.sample_at(id, vb).sample_index,
                });
            }
            PairKind::Impostor => {
                let ida = ids[draw(ids.len())];
                let idb = loop {
                    let id = ids[draw(ids.len())];
                    if id != ida {
                        break id;
                    }
                };
                let va = draw(spi);
                let vb = draw(spi);
                pairs.push(FacePair {
                    attacker: dataset.sample_at(ida, va).sample_index,
                    victim: dataset.sample_at(idb, vb).sample_index,
                });
            }
        }
    }
    Ok(PairSet {
        kind,
        pool,
        seed,
        pairs,
    })
}
