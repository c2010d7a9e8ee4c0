//! Synthetic attribute-driven image datasets, seen/unseen splits and the
//! on-disk dataset layout.
//!
//! Every class owns a row of attributes in `[0, 1]`. Images are rendered
//! from that row: attribute `j` sets the intensity of colour channel `j % 3`
//! inside the rectangle of grid cell `j / 3`. A designated subset of
//! attributes is held almost constant across the classes that will be seen
//! during training and spread out across the classes held back as unseen,
//! which is the regime where an embedding trained on seen classes learns to
//! ignore attributes that later matter.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of each seen class's images reserved for the seen-test split.
pub const SEEN_TEST_FRACTION: f64 = 0.2;

/// An `height x width x channels` image with values in `[0, 1]`, stored
/// row-major in HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels}"),
                format!("{} values", pixels.len()),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = self.shape();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        if chw.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width}"),
                format!("{} values", chw.len()),
            ));
        }
        let mut pixels = vec![0.0; chw.len()];
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    pixels[(y * width + x) * channels + ch] =
                        chw[(ch * height + y) * width + x].clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub low_variance_fraction: f64,
    /// Number of classes the generator spreads the low-variance attributes over.
    pub unseen_count: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_classes: 20,
            num_attributes: 24,
            n_per_class: 60,
            image_size: 32,
            noise_std: 0.05,
            low_variance_fraction: 0.25,
            unseen_count: 5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_attributes == 0 || self.n_per_class == 0 {
            return Err(Error::Config(
                "num_classes, num_attributes and n_per_class must be positive".into(),
            ));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.low_variance_fraction) {
            return Err(Error::Config(format!(
                "low_variance_fraction {} outside [0, 1]",
                self.low_variance_fraction
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} < 0", self.noise_std)));
        }
        if self.unseen_count >= self.num_classes {
            return Err(Error::Config(format!(
                "unseen_count {} leaves no seen classes out of {}",
                self.unseen_count, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn low_variance_count(&self) -> usize {
        (self.low_variance_fraction * self.num_attributes as f64).round() as usize
    }
}

/// Classes and attributes the generator engineered, kept so splits can
/// honour them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Designation {
    pub unseen_classes: Vec<usize>,
    pub low_variance_attributes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// `K x d` per-class attribute values.
    pub class_attributes: Array2<f64>,
    pub class_names: Vec<String>,
    pub designation: Option<Designation>,
}

impl Dataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_attributes: Array2<f64>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            class_attributes,
            class_names,
            designation: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.class_names.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} class names for {k} classes",
                self.class_names.len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::InvalidInput(format!(
                "image {i} has label {l} but there are {k} classes"
            )));
        }
        for (c, row) in self.class_attributes.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!(
                    "class {c} has an all-zero attribute row"
                )));
            }
        }
        if let Some(first) = self.images.first() {
            if let Some((i, _)) = self
                .images
                .iter()
                .enumerate()
                .find(|(_, im)| im.shape() != first.shape())
            {
                return Err(Error::InvalidInput(format!(
                    "image {i} shape differs from image 0"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_attributes.nrows()
    }

    pub fn num_attributes(&self) -> usize {
        self.class_attributes.ncols()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    /// Subset of `seen_classes` held out of training and scored as pseudo-unseen.
    pub val_classes: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub seen_test_ids: Vec<usize>,
    pub unseen_test_ids: Vec<usize>,
}

impl SplitSpec {
    /// Seen classes whose images drive the training losses.
    pub fn training_classes(&self) -> Vec<usize> {
        self.seen_classes
            .iter()
            .copied()
            .filter(|c| !self.val_classes.contains(c))
            .collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .seen_classes
            .iter()
            .chain(&self.unseen_classes)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    /// Checks the partition invariants against the labels of `dataset`.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let seen: BTreeSet<_> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<_> = self.unseen_classes.iter().copied().collect();
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidInput(format!(
                "class {c} is both seen and unseen"
            )));
        }
        if let Some(c) = self.val_classes.iter().find(|c| !seen.contains(c)) {
            return Err(Error::InvalidInput(format!(
                "validation class {c} is not a seen class"
            )));
        }
        let mut ids = BTreeSet::new();
        let lists = [
            ("train", &self.train_ids, &seen),
            ("seen_test", &self.seen_test_ids, &seen),
            ("unseen_test", &self.unseen_test_ids, &unseen),
        ];
        for (name, list, allowed) in lists {
            for &id in list.iter() {
                let label = *labels.get(id).ok_or_else(|| {
                    Error::InvalidInput(format!("{name} id {id} out of range"))
                })?;
                if !allowed.contains(&label) {
                    return Err(Error::InvalidInput(format!(
                        "{name} image {id} has label {label} outside its class set"
                    )));
                }
                if !ids.insert(id) {
                    return Err(Error::InvalidInput(format!(
                        "image {id} appears in more than one split list"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Grid layout used by the renderer: `(rows, cols)` of attribute cells.
fn cell_grid(num_attributes: usize) -> (usize, usize) {
    let cells = num_attributes.div_ceil(3);
    let cols = (cells as f64).sqrt().ceil() as usize;
    (cells.div_ceil(cols), cols)
}

/// Renders the noiseless image of an attribute row.
pub fn render_attributes(attributes: ArrayView1<f64>, size: usize) -> Image {
    let d = attributes.len();
    let (rows, cols) = cell_grid(d);
    let cell_h = size / rows;
    let cell_w = size / cols;
    let inset_h = usize::from(cell_h >= 3);
    let inset_w = usize::from(cell_w >= 3);
    let mut image = Image::filled(size, size, 3, 0.0);
    for (j, &value) in attributes.iter().enumerate() {
        let cell = j / 3;
        let channel = j % 3;
        let (r, c) = (cell / cols, cell % cols);
        let y0 = r * cell_h + inset_h;
        let y1 = (r + 1) * cell_h - inset_h;
        let x0 = c * cell_w + inset_w;
        let x1 = (c + 1) * cell_w - inset_w;
        for y in y0..y1 {
            for x in x0..x1 {
                image.pixels[(y * size + x) * 3 + channel] = value.clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Draws class attributes and renders `n_per_class` noisy images per class.
/// Stream 0 of the seeded generator drives the class table; image `i` draws
/// its noise from stream `i + 1`.
pub fn generate_synthetic(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let k = config.num_classes;
    let d = config.num_attributes;
    let mut rng = stream_rng(config.seed, 0);

    let mut attr_ids: Vec<usize> = (0..d).collect();
    attr_ids.shuffle(&mut rng);
    let mut low_var: Vec<usize> = attr_ids[..config.low_variance_count()].to_vec();
    low_var.sort_unstable();

    let mut class_ids: Vec<usize> = (0..k).collect();
    class_ids.shuffle(&mut rng);
    let mut unseen: Vec<usize> = class_ids[..config.unseen_count].to_vec();
    unseen.sort_unstable();

    let mut attributes = Array2::<f64>::zeros((k, d));
    for j in 0..d {
        if low_var.binary_search(&j).is_ok() {
            let base = rng.random_range(0.35..0.65);
            // evenly spaced levels guarantee spread over the unseen classes
            let u = unseen.len();
            let mut levels: Vec<f64> = (0..u)
                .map(|i| 0.05 + 0.9 * (i as f64 + 0.5) / u as f64)
                .collect();
            levels.shuffle(&mut rng);
            let mut next_level = levels.into_iter();
            for c in 0..k {
                attributes[[c, j]] = if unseen.binary_search(&c).is_ok() {
                    next_level.next().unwrap_or(base)
                } else {
                    base + rng.random_range(-0.03..0.03)
                };
            }
        } else {
            for c in 0..k {
                attributes[[c, j]] = rng.random_range(0.0..1.0);
            }
        }
    }
    for c in 0..k {
        if attributes.row(c).iter().all(|&v| v == 0.0) {
            attributes[[c, 0]] = 0.5;
        }
    }

    let noise = if config.noise_std > 0.0 {
        Some(Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let templates: Vec<Image> = (0..k)
        .map(|c| render_attributes(attributes.row(c), config.image_size))
        .collect();
    let mut images = Vec::with_capacity(k * config.n_per_class);
    let mut labels = Vec::with_capacity(k * config.n_per_class);
    for c in 0..k {
        for _ in 0..config.n_per_class {
            let id = images.len() as u64;
            let mut image = templates[c].clone();
            if let Some(noise) = &noise {
                let mut img_rng = stream_rng(config.seed, id + 1);
                for p in image.pixels.iter_mut() {
                    *p = (*p + noise.sample(&mut img_rng)).clamp(0.0, 1.0);
                }
            }
            images.push(image);
            labels.push(c);
        }
    }

    Ok(Dataset {
        images,
        labels,
        class_attributes: attributes,
        class_names: (0..k).map(|c| format!("class_{c:02}")).collect(),
        designation: Some(Designation {
            unseen_classes: unseen,
            low_variance_attributes: low_var,
        }),
    })
}

/// Partitions classes into seen/unseen (honouring the generator's
/// designation when it matches `unseen_count`), picks validation classes
/// among the seen ones and splits seen-class images into train and
/// seen-test.
pub fn make_splits(
    dataset: &Dataset,
    unseen_count: usize,
    val_count: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let k = dataset.num_classes();
    if unseen_count + val_count >= k {
        return Err(Error::Config(format!(
            "{unseen_count} unseen + {val_count} validation classes leave no training classes out of {k}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let unseen: Vec<usize> = match &dataset.designation {
        Some(des) if des.unseen_classes.len() == unseen_count => des.unseen_classes.clone(),
        _ => {
            let mut ids: Vec<usize> = (0..k).collect();
            ids.shuffle(&mut rng);
            let mut picked = ids[..unseen_count].to_vec();
            picked.sort_unstable();
            picked
        }
    };
    let seen: Vec<usize> = (0..k).filter(|c| !unseen.contains(c)).collect();
    let mut shuffled_seen = seen.clone();
    shuffled_seen.shuffle(&mut rng);
    let mut val: Vec<usize> = shuffled_seen[..val_count].to_vec();
    val.sort_unstable();

    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, &label) in dataset.labels.iter().enumerate() {
        per_class.entry(label).or_default().push(id);
    }
    let mut train_ids = Vec::new();
    let mut seen_test_ids = Vec::new();
    let mut unseen_test_ids = Vec::new();
    for (class, mut ids) in per_class {
        if unseen.contains(&class) {
            unseen_test_ids.extend(ids);
            continue;
        }
        ids.shuffle(&mut rng);
        let n_test = ((ids.len() as f64) * SEEN_TEST_FRACTION).round() as usize;
        let n_test = n_test.min(ids.len().saturating_sub(1)).max(usize::from(ids.len() > 1));
        let (test, train) = ids.split_at(n_test);
        seen_test_ids.extend_from_slice(test);
        train_ids.extend_from_slice(train);
    }
    train_ids.sort_unstable();
    seen_test_ids.sort_unstable();
    unseen_test_ids.sort_unstable();

    let splits = SplitSpec {
        seen_classes: seen,
        unseen_classes: unseen,
        val_classes: val,
        train_ids,
        seen_test_ids,
        unseen_test_ids,
    };
    let has_training_images = splits.train_ids.iter().any(|&id| {
        !splits.val_classes.contains(&dataset.labels[id])
    });
    if !has_training_images {
        return Err(Error::Config("split leaves no training images".into()));
    }
    splits.validate(&dataset.labels)?;
    Ok(splits)
}

/// Read access to a dataset as seen by training code.
pub trait DataAccess {
    fn image(&self, id: usize) -> &Image;
    fn label(&self, id: usize) -> usize;
    fn class_attributes(&self, class: usize) -> ArrayView1<'_, f64>;
    fn num_attributes(&self) -> usize;
    fn image_shape(&self) -> (usize, usize, usize);
}

impl DataAccess for Dataset {
    fn image(&self, id: usize) -> &Image {
        &self.images[id]
    }

    fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    fn class_attributes(&self, class: usize) -> ArrayView1<'_, f64> {
        self.class_attributes.row(class)
    }

    fn num_attributes(&self) -> usize {
        Dataset::num_attributes(self)
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        Dataset::image_shape(self).unwrap_or((0, 0, 0))
    }
}

/// Everything a [`AccessLogger`] observed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessLog {
    pub image_ids: BTreeSet<usize>,
    pub classes: BTreeSet<usize>,
}

/// Wraps a dataset and records every image id and class row read through it.
pub struct AccessLogger<'a, D: DataAccess> {
    inner: &'a D,
    log: RefCell<AccessLog>,
}

impl<'a, D: DataAccess> AccessLogger<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        AccessLogger {
            inner,
            log: RefCell::new(AccessLog::default()),
        }
    }

    pub fn log(&self) -> AccessLog {
        self.log.borrow().clone()
    }
}

impl<D: DataAccess> DataAccess for AccessLogger<'_, D> {
    fn image(&self, id: usize) -> &Image {
        self.log.borrow_mut().image_ids.insert(id);
        self.inner.image(id)
    }

    fn label(&self, id: usize) -> usize {
        self.log.borrow_mut().image_ids.insert(id);
        self.inner.label(id)
    }

    fn class_attributes(&self, class: usize) -> ArrayView1<'_, f64> {
        self.log.borrow_mut().classes.insert(class);
        self.inner.class_attributes(class)
    }

    fn num_attributes(&self) -> usize {
        self.inner.num_attributes()
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.inner.image_shape()
    }
}

// ---------------------------------------------------------------------------
// files

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::InvalidInput(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(
        image
            .pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: message.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(bad("truncated PPM pixel data"));
    }
    let pixels = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, 3, pixels)
}

/// Contents of `gen_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    #[serde(default)]
    generator: Option<GenConfig>,
    #[serde(default)]
    designation: Option<Designation>,
    seen_classes: Vec<usize>,
    unseen_classes: Vec<usize>,
    val_classes: Vec<usize>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_classes_csv(
    path: &Path,
    class_ids: &[usize],
    names: &[String],
    attributes: &Array2<f64>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["class_id".to_string(), "name".to_string()];
    header.extend((1..=attributes.ncols()).map(|j| format!("a_{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, (&id, name)) in class_ids.iter().zip(names).enumerate() {
        let mut record = vec![id.to_string(), name.clone()];
        record.extend(attributes.row(row).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parsed `classes.csv`: ids in file order, names and the attribute matrix.
pub struct ClassTable {
    pub class_ids: Vec<usize>,
    pub names: Vec<String>,
    pub attributes: Array2<f64>,
}

pub fn read_classes_csv(path: &Path) -> Result<ClassTable> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header_len = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if header_len < 3 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected class_id,name,a_1..a_d".into(),
        });
    }
    let d = header_len - 2;
    let mut class_ids = Vec::new();
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != header_len {
            return Err(err(format!(
                "row {row} has {} columns, expected {header_len}",
                record.len()
            )));
        }
        class_ids.push(
            record[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("bad class id {:?}", &record[0])))?,
        );
        names.push(record[1].to_string());
        for field in record.iter().skip(2) {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad attribute value {field:?}")))?,
            );
        }
    }
    let attributes = Array2::from_shape_vec((class_ids.len(), d), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(ClassTable {
        class_ids,
        names,
        attributes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitKind {
    Train,
    SeenTest,
    UnseenTest,
}

impl SplitKind {
    fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::SeenTest => "seen_test",
            SplitKind::UnseenTest => "unseen_test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "train" => Some(SplitKind::Train),
            "seen_test" => Some(SplitKind::SeenTest),
            "unseen_test" => Some(SplitKind::UnseenTest),
            _ => None,
        }
    }
}

/// `(image_id, split, class_id)` rows from a `splits.csv`.
fn read_split_rows(path: &Path) -> Result<Vec<(usize, SplitKind, usize)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", record.len())));
        }
        let id = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(format!("bad image id {:?}", &record[0])))?;
        let kind = SplitKind::parse(&record[1])
            .ok_or_else(|| err(format!("unknown split {:?}", &record[1])))?;
        let class = record[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(format!("bad class id {:?}", &record[2])))?;
        rows.push((id, kind, class));
    }
    Ok(rows)
}

/// Writes the dataset directory: `classes.csv`, `splits.csv`,
/// `images/<id>.ppm` and `gen_config.json`.
pub fn save_dataset(
    dataset: &Dataset,
    splits: &SplitSpec,
    generator: Option<&GenConfig>,
    dir: &Path,
) -> Result<()> {
    dataset.validate()?;
    splits.validate(&dataset.labels)?;
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let ids: Vec<usize> = (0..dataset.num_classes()).collect();
    write_classes_csv(
        &dir.join("classes.csv"),
        &ids,
        &dataset.class_names,
        &dataset.class_attributes,
    )?;

    let mut rows: Vec<(usize, SplitKind)> = splits
        .train_ids
        .iter()
        .map(|&i| (i, SplitKind::Train))
        .chain(splits.seen_test_ids.iter().map(|&i| (i, SplitKind::SeenTest)))
        .chain(splits.unseen_test_ids.iter().map(|&i| (i, SplitKind::UnseenTest)))
        .collect();
    rows.sort_unstable_by_key(|r| r.0);
    let splits_path = dir.join("splits.csv");
    let mut w = csv_writer(&splits_path)?;
    w.write_record(["image_id", "split", "class_id"])
        .map_err(|e| csv_error(&splits_path, e))?;
    for (id, kind) in rows {
        w.write_record([
            id.to_string(),
            kind.as_str().to_string(),
            dataset.labels[id].to_string(),
        ])
        .map_err(|e| csv_error(&splits_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&splits_path, e))?;

    for (id, image) in dataset.images.iter().enumerate() {
        write_ppm(image, &images_dir.join(format!("{id}.ppm")))?;
    }

    let manifest = DatasetManifest {
        generator: generator.cloned(),
        designation: dataset.designation.clone(),
        seen_classes: splits.seen_classes.clone(),
        unseen_classes: splits.unseen_classes.clone(),
        val_classes: splits.val_classes.clone(),
    };
    let manifest_path = dir.join("gen_config.json");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, SplitSpec)> {
    let table = read_classes_csv(&dir.join("classes.csv"))?;
    let classes_path = dir.join("classes.csv");
    for (row, &id) in table.class_ids.iter().enumerate() {
        if id != row {
            return Err(Error::Parse {
                path: classes_path,
                line: row as u64 + 2,
                message: format!("class ids must be 0..K in order, found {id} at row {row}"),
            });
        }
    }
    let splits_path = dir.join("splits.csv");
    let rows = read_split_rows(&splits_path)?;
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut labels = vec![usize::MAX; n];
    let mut images = Vec::with_capacity(n);
    let mut train_ids = Vec::new();
    let mut seen_test_ids = Vec::new();
    let mut unseen_test_ids = Vec::new();
    for (line, &(id, kind, class)) in rows.iter().enumerate() {
        if labels[id] != usize::MAX {
            return Err(Error::Parse {
                path: splits_path.clone(),
                line: line as u64 + 2,
                message: format!("image {id} listed twice"),
            });
        }
        labels[id] = class;
        match kind {
            SplitKind::Train => train_ids.push(id),
            SplitKind::SeenTest => seen_test_ids.push(id),
            SplitKind::UnseenTest => unseen_test_ids.push(id),
        }
    }
    if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(Error::Parse {
            path: splits_path,
            line: 0,
            message: format!("image {missing} missing from split list"),
        });
    }
    for id in 0..n {
        images.push(read_ppm(&dir.join("images").join(format!("{id}.ppm")))?);
    }

    let manifest_path = dir.join("gen_config.json");
    let manifest: Option<DatasetManifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    let (seen_classes, unseen_classes, val_classes, designation) = match manifest {
        Some(m) => (m.seen_classes, m.unseen_classes, m.val_classes, m.designation),
        None => {
            let seen: BTreeSet<usize> = train_ids
                .iter()
                .chain(&seen_test_ids)
                .map(|&i| labels[i])
                .collect();
            let unseen: BTreeSet<usize> = unseen_test_ids.iter().map(|&i| labels[i]).collect();
            (
                seen.into_iter().collect(),
                unseen.into_iter().collect(),
                Vec::new(),
                None,
            )
        }
    };

    let mut dataset = Dataset::new(images, labels, table.attributes, table.names)?;
    dataset.designation = designation;
    let splits = SplitSpec {
        seen_classes,
        unseen_classes,
        val_classes,
        train_ids,
        seen_test_ids,
        unseen_test_ids,
    };
    splits.validate(&dataset.labels)?;
    Ok((dataset, splits))
}

/// Attribute table and class-level split read from external files, with
/// class ids remapped to row indices of `class_attributes`.
#[derive(Debug, Clone)]
pub struct ExternalAttributes {
    pub class_ids: Vec<usize>,
    pub names: Vec<String>,
    pub class_attributes: Array2<f64>,
    pub splits: SplitSpec,
    /// Row index of each image listed in an image-level split file.
    pub image_labels: BTreeMap<usize, usize>,
}

/// Loads a `classes.csv`-style attribute table plus either an image-level
/// split file (`image_id,split,class_id`) or a class-level one
/// (`class_id,split` with split in `seen`, `unseen`, `val`).
pub fn load_external_attributes(
    classes_file: &Path,
    splits_file: &Path,
) -> Result<ExternalAttributes> {
    let table = read_classes_csv(classes_file)?;
    let index: BTreeMap<usize, usize> = table
        .class_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    if index.len() != table.class_ids.len() {
        return Err(Error::Parse {
            path: classes_file.to_path_buf(),
            line: 0,
            message: "duplicate class ids".into(),
        });
    }
    if !splits_file.exists() {
        return Err(Error::MissingFile(splits_file.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(splits_file).map_err(|e| csv_error(splits_file, e))?;
    let width = reader.headers().map_err(|e| csv_error(splits_file, e))?.len();
    drop(reader);
    let lookup = |class: usize, line: u64| {
        index.get(&class).copied().ok_or_else(|| Error::Parse {
            path: splits_file.to_path_buf(),
            line,
            message: format!("class {class} not in {}", classes_file.display()),
        })
    };

    let mut seen = BTreeSet::new();
    let mut unseen = BTreeSet::new();
    let mut val = BTreeSet::new();
    let mut splits = SplitSpec {
        seen_classes: Vec::new(),
        unseen_classes: Vec::new(),
        val_classes: Vec::new(),
        train_ids: Vec::new(),
        seen_test_ids: Vec::new(),
        unseen_test_ids: Vec::new(),
    };
    let mut image_labels = BTreeMap::new();
    if width == 2 {
        let mut reader =
            csv::Reader::from_path(splits_file).map_err(|e| csv_error(splits_file, e))?;
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(splits_file, e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
            let err = |message: String| Error::Parse {
                path: splits_file.to_path_buf(),
                line,
                message,
            };
            let class = record[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("bad class id {:?}", &record[0])))?;
            let class = lookup(class, line)?;
            match record[1].trim() {
                "seen" => {
                    seen.insert(class);
                }
                "unseen" => {
                    unseen.insert(class);
                }
                "val" => {
                    seen.insert(class);
                    val.insert(class);
                }
                other => return Err(err(format!("unknown class split {other:?}"))),
            }
        }
    } else {
        for (line, (id, kind, class)) in read_split_rows(splits_file)?.into_iter().enumerate() {
            let class = lookup(class, line as u64 + 2)?;
            image_labels.insert(id, class);
            match kind {
                SplitKind::Train => {
                    seen.insert(class);
                    splits.train_ids.push(id);
                }
                SplitKind::SeenTest => {
                    seen.insert(class);
                    splits.seen_test_ids.push(id);
                }
                SplitKind::UnseenTest => {
                    unseen.insert(class);
                    splits.unseen_test_ids.push(id);
                }
            }
        }
    }
    if let Some(c) = seen.intersection(&unseen).next() {
        return Err(Error::InvalidInput(format!(
            "class {} is listed as both seen and unseen",
            table.class_ids[*c]
        )));
    }
    splits.seen_classes = seen.into_iter().collect();
    splits.unseen_classes = unseen.into_iter().collect();
    splits.val_classes = val.into_iter().collect();
    Ok(ExternalAttributes {
        class_ids: table.class_ids,
        names: table.names,
        class_attributes: table.attributes,
        splits,
        image_labels,
    })
}
