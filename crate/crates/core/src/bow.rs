//! Bag-of-words vectors: histogram encoding, idf, signed power-law (SSR)
//! normalization, weighted multi-vocabulary concatenation, and the
//! quantization diagnostics (comparison count, product-vocabulary cells).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::binio::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::vocabulary::{Assignment, Vocabulary};

const BOW_MAGIC: &[u8; 4] = b"MVBW";

/// Dense, L2-normalized histogram. `zero` marks an image with no
/// descriptors (or only zero weight), whose vector is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVector {
    pub image_id: String,
    pub values: Vec<f32>,
    pub zero: bool,
}

impl BowVector {
    /// L2-normalizes `values` (computed in f64).
    pub fn from_f64(image_id: &str, values: &[f64]) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            BowVector {
                image_id: image_id.to_string(),
                values: values.iter().map(|v| (v / norm) as f32).collect(),
                zero: false,
            }
        } else {
            BowVector {
                image_id: image_id.to_string(),
                values: vec![0.0; values.len()],
                zero: true,
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }
}

/// Word counts of `word_ids`, optionally weighted by `idf`, L2-normalized.
pub fn encode_bow(a: &Assignment, k: usize, idf: Option<&[f64]>) -> Result<BowVector> {
    if let Some(idf) = idf {
        if idf.len() != k {
            return Err(Error::Parameter(format!(
                "idf has {} entries for k={k}",
                idf.len()
            )));
        }
    }
    let mut counts = vec![0.0f64; k];
    for &w in &a.word_ids {
        let slot = counts.get_mut(w as usize).ok_or_else(|| {
            Error::Data(format!(
                "image {}: word id {w} out of range for k={k}",
                a.image_id
            ))
        })?;
        *slot += 1.0;
    }
    if let Some(idf) = idf {
        counts.iter_mut().zip(idf).for_each(|(c, w)| *c *= w);
    }
    Ok(BowVector::from_f64(&a.image_id, &counts))
}

/// `idf[j] = ln(N / n_j)`, where `n_j` counts the images containing word
/// `j`. Unused words get 0.
pub fn compute_idf<'a, I>(corpus: I, k: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut containing = vec![0usize; k];
    let mut n_images = 0usize;
    let mut seen = vec![usize::MAX; k];
    for (img, words) in corpus.into_iter().enumerate() {
        n_images += 1;
        for &w in words {
            if let Some(s) = seen.get_mut(w as usize) {
                if *s != img {
                    *s = img;
                    containing[w as usize] += 1;
                }
            }
        }
    }
    containing
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (n_images as f64 / c as f64).ln()
            }
        })
        .collect()
}

/// Signed power law `|v_i|^beta * sign(v_i)` then L2 normalization. `beta`
/// must lie in `[0, 1]`; 0.5 is signed square rooting and 1 is plain
/// renormalization.
pub fn ssr(v: &[f32], beta: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!(
            "power-law exponent must lie in [0, 1], got {beta}"
        )));
    }
    let powered: Vec<f64> = v
        .iter()
        .map(|&x| {
            let x = x as f64;
            if x == 0.0 {
                0.0
            } else {
                x.abs().powf(beta).copysign(x)
            }
        })
        .collect();
    Ok(BowVector::from_f64("", &powered).values)
}

/// SSR applied to a whole BOW vector, keeping its id and zero flag.
pub fn ssr_bow(v: &BowVector, beta: f64) -> Result<BowVector> {
    let values = ssr(&v.values, beta)?;
    let zero = values.iter().all(|&x| x == 0.0);
    Ok(BowVector {
        image_id: v.image_id.clone(),
        values,
        zero,
    })
}

/// Default block weights: `ln k_v`, or 1 for every block when all
/// vocabularies have the same size.
pub fn default_weights(ks: &[usize]) -> Vec<f64> {
    if ks.windows(2).all(|w| w[0] == w[1]) {
        vec![1.0; ks.len()]
    } else {
        ks.iter().map(|&k| (k as f64).ln()).collect()
    }
}

/// Concatenates `w_v * block_v` and L2-normalizes the result.
pub fn concat_bundle(blocks: &[BowVector], weights: &[f64]) -> Result<BowVector> {
    if blocks.is_empty() || blocks.len() != weights.len() {
        return Err(Error::Parameter(format!(
            "{} blocks for {} weights",
            blocks.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Parameter(format!("block weight {w} is not positive")));
    }
    let id = &blocks[0].image_id;
    if blocks.iter().any(|b| &b.image_id != id) {
        return Err(Error::Parameter("blocks belong to different images".into()));
    }
    let total: usize = blocks.iter().map(BowVector::dim).sum();
    let mut values = Vec::with_capacity(total);
    for (b, &w) in blocks.iter().zip(weights) {
        values.extend(b.values.iter().map(|&v| v as f64 * w));
    }
    Ok(BowVector::from_f64(id, &values))
}

/// Ordered vocabularies with per-block weights and optional idf vectors.
#[derive(Debug, Clone)]
pub struct VocabularyBundle {
    pub vocabularies: Vec<Vocabulary>,
    pub weights: Vec<f64>,
    pub idf: Vec<Option<Vec<f64>>>,
}

impl VocabularyBundle {
    /// Bundle with [`default_weights`] and no idf.
    pub fn new(vocabularies: Vec<Vocabulary>) -> Result<Self> {
        let weights = default_weights(&vocabularies.iter().map(Vocabulary::k).collect::<Vec<_>>());
        Self::with_weights(vocabularies, weights)
    }

    pub fn with_weights(vocabularies: Vec<Vocabulary>, weights: Vec<f64>) -> Result<Self> {
        if vocabularies.is_empty() {
            return Err(Error::Parameter("empty vocabulary bundle".into()));
        }
        if weights.len() != vocabularies.len() {
            return Err(Error::Parameter("one weight per vocabulary required".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!(
                "vocabulary weight {w} is not positive (a k=1 vocabulary has ln k = 0)"
            )));
        }
        let idf = vec![None; vocabularies.len()];
        Ok(VocabularyBundle {
            vocabularies,
            weights,
            idf,
        })
    }

    pub fn ks(&self) -> Vec<usize> {
        self.vocabularies.iter().map(Vocabulary::k).collect()
    }

    /// Start of each block within the concatenated vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.vocabularies
            .iter()
            .scan(0, |acc, v| {
                let start = *acc;
                *acc += v.k();
                Some(start)
            })
            .collect()
    }

    pub fn total_dim(&self) -> usize {
        self.vocabularies.iter().map(Vocabulary::k).sum()
    }

    pub fn quantization_complexity(&self) -> usize {
        quantization_complexity(self.ks())
    }

    /// Encodes one image given one assignment per vocabulary: histogram,
    /// idf (if set), SSR per block, weighted concatenation.
    pub fn encode(&self, image_id: &str, assignments: &[Assignment], beta: f64) -> Result<BowVector> {
        if assignments.len() != self.vocabularies.len() {
            return Err(Error::Parameter(format!(
                "{} assignments for {} vocabularies",
                assignments.len(),
                self.vocabularies.len()
            )));
        }
        let blocks = assignments
            .iter()
            .zip(&self.vocabularies)
            .zip(&self.idf)
            .map(|((a, v), idf)| {
                let mut block = ssr_bow(&encode_bow(a, v.k(), idf.as_deref())?, beta)?;
                block.image_id = image_id.to_string();
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        concat_bundle(&blocks, &self.weights)
    }
}

/// Vector comparisons per local descriptor for exhaustive quantization
/// against every vocabulary: the sum of the vocabulary sizes.
pub fn quantization_complexity(ks: impl IntoIterator<Item = usize>) -> usize {
    ks.into_iter().sum()
}

/// Number of distinct word-id tuples across vocabularies, i.e. non-empty
/// cells of the product vocabulary. All slices must describe the same
/// descriptors in the same order.
pub fn unique_assignments(per_vocab: &[&[u32]]) -> Result<usize> {
    let Some(first) = per_vocab.first() else {
        return Ok(0);
    };
    let n = first.len();
    if let Some(bad) = per_vocab.iter().find(|a| a.len() != n) {
        return Err(Error::Data(format!(
            "assignment lengths differ ({} vs {n})",
            bad.len()
        )));
    }
    let tuples: HashSet<Vec<u32>> = (0..n)
        .map(|i| per_vocab.iter().map(|a| a[i]).collect())
        .collect();
    Ok(tuples.len())
}

/// `N x D` matrix of BOW (or short) vectors with image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BowMatrix {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `N x dim`.
    pub values: Vec<f32>,
}

impl BowMatrix {
    pub fn new(dim: usize) -> Self {
        BowMatrix {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_vectors(dim: usize, vectors: &[BowVector]) -> Result<Self> {
        let mut m = BowMatrix::new(dim);
        for v in vectors {
            m.push(&v.image_id, &v.values)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, id: &str, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Parameter(format!(
                "row {id} has dimension {}, matrix has {}",
                values.len(),
                self.dim
            )));
        }
        self.ids.push(id.to_string());
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_zero_row(&self, i: usize) -> bool {
        self.row(i).iter().all(|&v| v == 0.0)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn vector(&self, i: usize) -> BowVector {
        BowVector {
            image_id: self.ids[i].clone(),
            values: self.row(i).to_vec(),
            zero: self.is_zero_row(i),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_header(BOW_MAGIC);
        enc.u64(self.ids.len() as u64);
        enc.u32(self.dim as u32);
        for id in &self.ids {
            enc.str(id);
        }
        enc.f32s(self.values.iter().copied());
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::with_header(bytes, BOW_MAGIC, "bow matrix file")?;
        let n = dec.u64()?;
        let dim = dec.u32()? as usize;
        // Each id needs at least its 4-byte length prefix.
        if n > (bytes.len() as u64) / 4 {
            return Err(Error::Corruption(format!("bow matrix file: {n} rows declared")));
        }
        let ids = (0..n).map(|_| dec.str()).collect::<Result<Vec<_>>>()?;
        let values = dec.f32s(binio::checked_len(n, dim as u64, "bow matrix file")?)?;
        dec.finish()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("bow matrix file: non-finite values".into()));
        }
        Ok(BowMatrix { dim, ids, values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
