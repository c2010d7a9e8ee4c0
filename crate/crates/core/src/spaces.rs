//! Semantic-space helpers: class embeddings and the attribute-variance
//! diagnostic for semantic loss between two image sets.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub class_id: usize,
    pub vector: Array1<f64>,
}

impl ClassEmbedding {
    pub fn from_attributes(class_id: usize, attributes: ArrayView1<f64>) -> Result<Self> {
        Ok(ClassEmbedding {
            class_id,
            vector: l2_normalize(attributes)?,
        })
    }
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput(format!(
            "cannot normalise a vector of norm {norm}"
        )));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Normalised embeddings for the listed classes, stacked row-wise in the
/// order given.
pub fn class_embedding_matrix(
    attributes: ArrayView2<f64>,
    classes: &[usize],
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((classes.len(), attributes.ncols()));
    for (row, &c) in classes.iter().enumerate() {
        out.row_mut(row).assign(&l2_normalize(attributes.row(c))?);
    }
    Ok(out)
}

/// Unit-norm embeddings of a fixed list of classes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub class_ids: Vec<usize>,
    pub vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn from_attributes(attributes: ArrayView2<f64>, classes: &[usize]) -> Result<Self> {
        Ok(EmbeddingTable {
            class_ids: classes.to_vec(),
            vectors: class_embedding_matrix(attributes, classes)?,
        })
    }

    /// Builds the table from individually fetched attribute rows.
    pub fn from_rows<'a>(
        classes: &[usize],
        mut row_of: impl FnMut(usize) -> ArrayView1<'a, f64>,
    ) -> Result<Self> {
        let rows: Vec<Array1<f64>> = classes
            .iter()
            .map(|&c| l2_normalize(row_of(c)))
            .collect::<Result<_>>()?;
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut vectors = Array2::zeros((rows.len(), d));
        for (mut dst, src) in vectors.rows_mut().into_iter().zip(&rows) {
            if src.len() != d {
                return Err(Error::shape("embedding table", d, src.len()));
            }
            dst.assign(src);
        }
        Ok(EmbeddingTable {
            class_ids: classes.to_vec(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn embedding(&self, row: usize) -> ClassEmbedding {
        ClassEmbedding {
            class_id: self.class_ids[row],
            vector: self.vectors.row(row).to_owned(),
        }
    }
}

/// Which rows a [`VarianceProfile`] was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceSource {
    /// One row per image (class rows repeated when images carry no own annotation).
    PerImage,
    /// One row per distinct class.
    PerClass,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub variance: Array1<f64>,
    pub source: VarianceSource,
}

/// Population variance of every column of `rows`.
pub fn attribute_variance(rows: ArrayView2<f64>) -> Result<VarianceProfile> {
    if rows.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "attribute variance needs at least 2 rows, got {}",
            rows.nrows()
        )));
    }
    let n = rows.nrows() as f64;
    let mean = rows.sum_axis(Axis(0)) / n;
    let mut variance = Array1::zeros(rows.ncols());
    for row in rows.rows() {
        for ((v, &x), &m) in variance.iter_mut().zip(row).zip(&mean) {
            let dx: f64 = x - m;
            *v += dx * dx;
        }
    }
    variance /= n;
    Ok(VarianceProfile {
        variance,
        source: VarianceSource::Custom,
    })
}

/// Cosine of the angle between two variance profiles. Values near 1 mean the
/// two sets spread their attributes alike; lower values mean attributes that
/// discriminate in one set are flat in the other.
pub fn variance_cosine(a: &VarianceProfile, b: &VarianceProfile) -> Result<f64> {
    if a.variance.len() != b.variance.len() {
        return Err(Error::shape(
            "variance_cosine",
            a.variance.len(),
            b.variance.len(),
        ));
    }
    let na = a.variance.dot(&a.variance).sqrt();
    let nb = b.variance.dot(&b.variance).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput(
            "variance_cosine of an all-zero profile".into(),
        ));
    }
    Ok((a.variance.dot(&b.variance) / (na * nb)).clamp(0.0, 1.0))
}

/// Variance profile of a stream of attribute rows of width `d`.
pub fn profile_of_rows<'a>(
    rows: impl IntoIterator<Item = ArrayView1<'a, f64>>,
    d: usize,
    source: VarianceSource,
) -> Result<VarianceProfile> {
    let mut values = Vec::new();
    let mut n = 0;
    for row in rows {
        if row.len() != d {
            return Err(Error::shape("variance profile", d, row.len()));
        }
        values.extend(row.iter().copied());
        n += 1;
    }
    let matrix = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut profile = attribute_variance(matrix.view())?;
    profile.source = source;
    Ok(profile)
}

/// Variance profiles of two multisets of classes, each class contributing
/// its attribute row once per occurrence, and the cosine between them.
pub fn variance_shift(
    attributes: ArrayView2<f64>,
    a_classes: &[usize],
    b_classes: &[usize],
    source: VarianceSource,
) -> Result<(VarianceProfile, VarianceProfile, f64)> {
    let d = attributes.ncols();
    let a = profile_of_rows(a_classes.iter().map(|&c| attributes.row(c)), d, source)?;
    let b = profile_of_rows(b_classes.iter().map(|&c| attributes.row(c)), d, source)?;
    let cos = variance_cosine(&a, &b)?;
    Ok((a, b, cos))
}
