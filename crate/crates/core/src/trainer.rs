//! Alternating critic/generator optimisation, learning-rate plateau decay,
//! checkpoints and the alpha/beta grid search.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataAccess, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{harmonic_mean, per_class_top1, predict, score};
use crate::nets::{build_variant, images_to_batch, ModelBundle, NetConfig, ParamMap, Variant};
use crate::objectives::{
    critic_grads, term_gradients, AdvForm, Batch, ClsSampling, HyperParams,
    LossBreakdown, RankingMode,
};
use crate::spaces::EmbeddingTable;

/// Schedule and run-length settings around [`HyperParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before the LR is cut.
    pub patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    /// Epochs of the decoder-only second phase of the direct-map variant;
    /// `None` reuses `epochs`.
    pub direct_map_decoder_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: HyperParams::default(),
            epochs: 300,
            seed: 0,
            patience: 10,
            lr_decay: 0.1,
            min_lr: 1e-6,
            direct_map_decoder_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.min_lr > 0.0) {
            return Err(Error::Config("min_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Mutable optimisation state around a bundle.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub critic_lr: f64,
    /// Momentum buffers keyed by map name.
    pub velocity: BTreeMap<String, Vec<f64>>,
    /// Maps excluded from generator updates.
    pub frozen: BTreeSet<String>,
    pub best_val: f64,
    pub stale_epochs: usize,
    pub val_history: Vec<f64>,
}

impl TrainState {
    pub fn new(bundle: ModelBundle, hyper: &HyperParams) -> Self {
        TrainState {
            bundle,
            step: 0,
            epoch: 0,
            lr: hyper.learning_rate,
            critic_lr: hyper.critic_learning_rate,
            velocity: BTreeMap::new(),
            frozen: BTreeSet::new(),
            best_val: f64::NEG_INFINITY,
            stale_epochs: 0,
            val_history: Vec::new(),
        }
    }
}

/// Values observed during one [`train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Largest absolute critic parameter after each critic update.
    pub critic_max_abs: Vec<f64>,
}

fn sgd_momentum(map: &mut ParamMap, grads: &[f64], velocity: &mut Vec<f64>, lr: f64, momentum: f64) -> Result<()> {
    if velocity.len() != grads.len() {
        *velocity = vec![0.0; grads.len()];
    }
    let mut params = map.params();
    if params.len() != grads.len() {
        return Err(Error::shape(&map.name, params.len(), grads.len()));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    map.set_params(&params)
}

/// Rescales `g` onto the ball of radius `cap` when it lies outside.
pub fn clip_norm(g: &[f64], cap: f64) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cap {
        g.iter().map(|v| v * cap / norm).collect()
    } else {
        g.to_vec()
    }
}

fn clip_critic(map: &mut ParamMap, c: f64) {
    map.for_each_param_mut(|p| *p = p.clamp(-c, c));
}

fn non_finite(component: &str, step: u64, losses: &LossBreakdown) -> Error {
    Error::NonFinite {
        component: component.to_string(),
        step,
        detail: format!("{losses:?}"),
    }
}

/// `n_critic` critic updates (each followed by clipping under the
/// Wasserstein form), then one generator-side update on
/// `cls + alpha * rec + beta * adv_E`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    table: &EmbeddingTable,
    hyper: &HyperParams,
    mode: RankingMode,
) -> Result<StepOutcome> {
    let mut critic_max_abs = Vec::new();
    if state.bundle.d.is_some() && hyper.n_critic > 0 {
        let real = state
            .bundle
            .f
            .as_ref()
            .expect("a bundle with a critic has F")
            .forward(batch.images.view())?;
        let fake = state.bundle.embed_from_trunk(batch.trunk.view())?;
        let critic = state.bundle.d.as_mut().expect("critic");
        for _ in 0..hyper.n_critic {
            let (value, grads) = critic_grads(critic, real.view(), fake.view(), hyper.adv_form)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    component: "adv_D".into(),
                    step: state.step,
                    detail: format!("critic loss {value}"),
                });
            }
            let vel = state.velocity.entry(critic.name.clone()).or_default();
            sgd_momentum(critic, &grads, vel, state.critic_lr, hyper.momentum)?;
            if hyper.adv_form == AdvForm::Wgan {
                clip_critic(critic, hyper.clip_c);
            }
            critic_max_abs.push(critic.max_abs_param());
        }
    }

    let terms = term_gradients(&state.bundle, batch, table, hyper, mode)?;
    if let Some(component) = terms.losses.first_non_finite() {
        return Err(non_finite(component, state.step, &terms.losses));
    }
    let total = terms.total(hyper);
    let critic_name = state.bundle.d.as_ref().map(|d| d.name.clone());
    for map in state.bundle.maps_mut() {
        if !map.trainable || state.frozen.contains(&map.name) || Some(&map.name) == critic_name.as_ref() {
            continue;
        }
        let Some(g) = total.get(&map.name) else { continue };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(&map.name, state.step, &terms.losses));
        }
        let vel = state.velocity.entry(map.name.clone()).or_default();
        match hyper.grad_clip_norm {
            Some(cap) => sgd_momentum(map, &clip_norm(g, cap), vel, state.lr, hyper.momentum)?,
            None => sgd_momentum(map, g, vel, state.lr, hyper.momentum)?,
        }
    }
    state.step += 1;
    Ok(StepOutcome {
        losses: terms.losses,
        critic_max_abs,
    })
}

/// Frozen-network outputs of a fixed image set, computed once per run.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub images: Array2<f64>,
    pub trunk: Array2<f64>,
    pub phi: Option<Array2<f64>>,
}

impl FeatureCache {
    pub fn build<D: DataAccess>(bundle: &ModelBundle, data: &D, ids: &[usize], with_phi: bool) -> Result<Self> {
        let labels = ids.iter().map(|&id| data.label(id)).collect();
        let images = images_to_batch(ids.iter().map(|&id| data.image(id)));
        let mut trunk = Array2::zeros((ids.len(), bundle.e_trunk.output_dim()));
        let mut phi = with_phi.then(|| Array2::zeros((ids.len(), bundle.phi.output_dim())));
        const CHUNK: usize = 256;
        for start in (0..ids.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(ids.len());
            let x = images.slice(s![start..end, ..]);
            trunk.slice_mut(s![start..end, ..]).assign(&bundle.trunk_features(x)?);
            if let Some(p) = phi.as_mut() {
                p.slice_mut(s![start..end, ..]).assign(&bundle.phi.forward(x)?);
            }
        }
        Ok(FeatureCache {
            ids: ids.to_vec(),
            labels,
            images,
            trunk,
            phi,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Batch made of the given cache rows.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            images: self.images.select(Axis(0), rows),
            trunk: self.trunk.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            phi_features: self.phi.as_ref().map(|p| p.select(Axis(0), rows)),
        }
    }
}

/// Per-epoch means of the loss terms plus validation score and LR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Validation H, absent when there are no validation classes.
    pub val_h: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    /// Bundle with the best validation score seen, if any epoch ran.
    pub best_bundle: Option<ModelBundle>,
    /// Epoch index of `best_bundle`.
    pub best_epoch: Option<usize>,
}

/// Validation protocol: validation classes act as pseudo-unseen, the
/// training classes' seen-test images as pseudo-seen, and every seen class
/// is a candidate.
#[derive(Debug, Clone)]
pub struct Validation {
    pseudo_unseen: FeatureCache,
    pseudo_seen: FeatureCache,
    table: EmbeddingTable,
    val_classes: Vec<usize>,
}

impl Validation {
    pub fn build<D: DataAccess>(bundle: &ModelBundle, data: &D, splits: &SplitSpec) -> Result<Option<Self>> {
        if splits.val_classes.is_empty() {
            return Ok(None);
        }
        let val: BTreeSet<usize> = splits.val_classes.iter().copied().collect();
        let seen_ids = splits
            .train_ids
            .iter()
            .chain(&splits.seen_test_ids)
            .copied()
            .filter(|&id| val.contains(&data.label(id)));
        let mut unseen_ids: Vec<usize> = seen_ids.collect();
        unseen_ids.sort_unstable();
        let pseudo_seen_ids: Vec<usize> = splits
            .seen_test_ids
            .iter()
            .copied()
            .filter(|&id| !val.contains(&data.label(id)))
            .collect();
        if unseen_ids.is_empty() || pseudo_seen_ids.is_empty() {
            return Ok(None);
        }
        let mut candidates = splits.seen_classes.clone();
        candidates.sort_unstable();
        Ok(Some(Validation {
            pseudo_unseen: FeatureCache::build(bundle, data, &unseen_ids, false)?,
            pseudo_seen: FeatureCache::build(bundle, data, &pseudo_seen_ids, false)?,
            table: EmbeddingTable::from_rows(&candidates, |c| data.class_attributes(c))?,
            val_classes: splits.val_classes.clone(),
        }))
    }

    pub fn harmonic(&self, bundle: &ModelBundle) -> Result<f64> {
        let acc = |cache: &FeatureCache| -> Result<f64> {
            let emb = bundle.embed_from_trunk(cache.trunk.view())?;
            let m = score(emb.view(), &self.table, &cache.labels)?;
            per_class_top1(&predict(&m)?, &m.labels)
        };
        Ok(harmonic_mean(acc(&self.pseudo_seen)?, acc(&self.pseudo_unseen)?))
    }

    pub fn val_classes(&self) -> &[usize] {
        &self.val_classes
    }
}

/// Seed of the sampled ranking loss for one batch.
fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 24) ^ batch as u64 ^ (1 << 62));
    rand::Rng::random(&mut rng)
}

/// Shuffled order of the cache rows for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Training classes and the ids of their training images. Validation
/// classes are removed from every loss.
pub fn training_ids<D: DataAccess>(data: &D, splits: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let classes = splits.training_classes();
    let ids = splits
        .train_ids
        .iter()
        .copied()
        .filter(|&id| classes.contains(&data.label(id)))
        .collect();
    (classes, ids)
}

/// Everything `run_epochs` needs besides the state.
pub struct TrainContext {
    pub cache: FeatureCache,
    pub table: EmbeddingTable,
    pub validation: Option<Validation>,
}

impl TrainContext {
    pub fn build<D: DataAccess>(bundle: &ModelBundle, data: &D, splits: &SplitSpec) -> Result<Self> {
        bundle.check_attributes(data.num_attributes())?;
        let (classes, ids) = training_ids(data, splits);
        if ids.is_empty() {
            return Err(Error::InvalidInput("training split is empty".into()));
        }
        let unseen: BTreeSet<usize> = splits.unseen_classes.iter().copied().collect();
        if classes.iter().any(|c| unseen.contains(c)) {
            return Err(Error::Contract("a training class is also unseen".into()));
        }
        let cache = FeatureCache::build(bundle, data, &ids, bundle.variant.has_decoder())?;
        let table = EmbeddingTable::from_rows(&classes, |c| data.class_attributes(c))?;
        let validation = Validation::build(bundle, data, splits)?;
        Ok(TrainContext {
            cache,
            table,
            validation,
        })
    }
}

/// One epoch of mini-batches; returns the size-weighted mean losses.
pub fn run_epoch(state: &mut TrainState, ctx: &TrainContext, cfg: &TrainConfig, hyper: &HyperParams) -> Result<LossBreakdown> {
    let order = epoch_order(ctx.cache.len(), cfg.seed, state.epoch);
    let mut mean = LossBreakdown::default();
    let n = order.len() as f64;
    for (b, rows) in order.chunks(hyper.batch_size).enumerate() {
        let batch = ctx.cache.batch(rows);
        let mode = match hyper.cls_sampling {
            ClsSampling::FullSum => RankingMode::FullSum,
            ClsSampling::Sampled => RankingMode::Sampled(batch_seed(cfg.seed, state.epoch, b)),
        };
        let out = train_step(state, &batch, &ctx.table, hyper, mode)?;
        mean.accumulate(&out.losses, rows.len() as f64 / n);
    }
    Ok(mean)
}

/// Applies the plateau rule after an epoch's validation score.
fn plateau_update(state: &mut TrainState, cfg: &TrainConfig, score: f64) {
    state.val_history.push(score);
    if score > state.best_val {
        state.best_val = score;
        state.stale_epochs = 0;
        return;
    }
    state.stale_epochs += 1;
    if state.stale_epochs >= cfg.patience && cfg.patience > 0 {
        let next = (state.lr * cfg.lr_decay).max(cfg.min_lr);
        if next < state.lr {
            state.critic_lr *= next / state.lr;
            state.lr = next;
        }
        state.stale_epochs = 0;
    }
}

/// Runs epochs until `state.epoch` reaches `until`, recording one row per
/// epoch. `hyper` may differ from `cfg.hyper` (the direct-map phases).
pub fn run_epochs(
    state: &mut TrainState,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    hyper: &HyperParams,
    until: usize,
    report: &mut TrainReport,
) -> Result<()> {
    while state.epoch < until {
        let losses = run_epoch(state, ctx, cfg, hyper)?;
        let val_h = ctx
            .validation
            .as_ref()
            .map(|v| v.harmonic(&state.bundle))
            .transpose()?;
        let monitor = val_h.unwrap_or(-losses.total);
        // ties keep the later, longer-trained bundle
        let keep = monitor >= state.best_val;
        plateau_update(state, cfg, monitor);
        if keep || report.best_bundle.is_none() {
            report.best_bundle = Some(state.bundle.clone());
            report.best_epoch = Some(state.epoch);
        }
        report.rows.push(EpochRow {
            epoch: state.epoch,
            losses,
            val_h,
            lr: state.lr,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Trains a fresh bundle of `variant` on the training split.
pub fn train<D: DataAccess>(
    data: &D,
    splits: &SplitSpec,
    net: &NetConfig,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    let mut bundle = build_variant(net, variant)?;
    if let Some(d) = bundle.d.as_mut() {
        if cfg.hyper.adv_form == AdvForm::Wgan {
            clip_critic(d, cfg.hyper.clip_c);
        }
    }
    let state = TrainState::new(bundle, &cfg.hyper);
    resume(state, data, splits, cfg)
}

/// Continues `state` up to `cfg.epochs` (plus the decoder phase for the
/// direct-map variant).
pub fn resume<D: DataAccess>(
    mut state: TrainState,
    data: &D,
    splits: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let ctx = TrainContext::build(&state.bundle, data, splits)?;
    let mut report = TrainReport::default();
    if state.bundle.variant == Variant::DirectMap {
        let phase1 = HyperParams {
            alpha: 0.0,
            beta: 0.0,
            ..cfg.hyper.clone()
        };
        run_epochs(&mut state, &ctx, cfg, &phase1, cfg.epochs, &mut report)?;
        let total = cfg.epochs + cfg.direct_map_decoder_epochs.unwrap_or(cfg.epochs);
        if state.epoch < total {
            let head = state.bundle.e_head.name.clone();
            if state.frozen.insert(head) {
                // the decoder phase restarts the schedule and selects on
                // training loss rather than validation H
                state.best_val = f64::NEG_INFINITY;
                state.stale_epochs = 0;
                state.lr = cfg.hyper.learning_rate;
                report.best_bundle = None;
            }
            let phase2 = HyperParams {
                beta: 0.0,
                ..cfg.hyper.clone()
            };
            let ctx = TrainContext {
                validation: None,
                ..ctx
            };
            run_epochs(&mut state, &ctx, cfg, &phase2, total, &mut report)?;
        }
    } else {
        run_epochs(&mut state, &ctx, cfg, &cfg.hyper, cfg.epochs, &mut report)?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((state, report))
}

// ---------------------------------------------------------------------------
// checkpoints and logs

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapEntry {
    name: String,
    file: String,
    len: usize,
    velocity_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    variant: Variant,
    net: NetConfig,
    maps: Vec<MapEntry>,
    step: u64,
    epoch: usize,
    lr: f64,
    critic_lr: f64,
    frozen: Vec<String>,
    best_val: Option<f64>,
    stale_epochs: usize,
    val_history: Vec<f64>,
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes every map's parameters (and momentum buffers) as little-endian
/// f64 blobs next to a JSON manifest.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut maps = Vec::new();
    for map in state.bundle.maps() {
        let stem = file_stem(&map.name);
        let file = format!("{stem}.bin");
        write_f64s(&dir.join(&file), &map.params())?;
        let velocity_file = match state.velocity.get(&map.name) {
            Some(v) => {
                let f = format!("{stem}.velocity.bin");
                write_f64s(&dir.join(&f), v)?;
                Some(f)
            }
            None => None,
        };
        maps.push(MapEntry {
            name: map.name.clone(),
            file,
            len: map.num_params(),
            velocity_file,
        });
    }
    let manifest = Manifest {
        variant: state.bundle.variant,
        net: state.bundle.config.clone(),
        maps,
        step: state.step,
        epoch: state.epoch,
        lr: state.lr,
        critic_lr: state.critic_lr,
        frozen: state.frozen.iter().cloned().collect(),
        best_val: state.best_val.is_finite().then_some(state.best_val),
        stale_epochs: state.stale_epochs,
        val_history: state.val_history.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut bundle = build_variant(&manifest.net, manifest.variant)?;
    let mut velocity = BTreeMap::new();
    for entry in &manifest.maps {
        let map = bundle
            .map_mut(&entry.name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint has unknown map {:?}", entry.name)))?;
        let params = read_f64s(&dir.join(&entry.file))?;
        if params.len() != entry.len || params.len() != map.num_params() {
            return Err(Error::shape(&entry.name, map.num_params(), params.len()));
        }
        map.set_params(&params)?;
        if let Some(f) = &entry.velocity_file {
            velocity.insert(entry.name.clone(), read_f64s(&dir.join(f))?);
        }
    }
    Ok(TrainState {
        bundle,
        step: manifest.step,
        epoch: manifest.epoch,
        lr: manifest.lr,
        critic_lr: manifest.critic_lr,
        velocity,
        frozen: manifest.frozen.into_iter().collect(),
        best_val: manifest.best_val.unwrap_or(f64::NEG_INFINITY),
        stale_epochs: manifest.stale_epochs,
        val_history: manifest.val_history,
    })
}

pub const TRAIN_LOG_HEADER: [&str; 10] = [
    "epoch", "cls", "feat", "pixel", "rec", "adv_E", "adv_D", "total", "val_H", "lr",
];

pub fn write_train_log(rows: &[EpochRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(TRAIN_LOG_HEADER).map_err(err)?;
    for r in rows {
        let l = &r.losses;
        w.write_record([
            r.epoch.to_string(),
            l.cls.to_string(),
            l.feat.to_string(),
            l.pixel.to_string(),
            l.rec.to_string(),
            l.adv_e.to_string(),
            l.adv_d.to_string(),
            l.total.to_string(),
            r.val_h.map(|v| v.to_string()).unwrap_or_default(),
            r.lr.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// grid search

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    /// Best validation score, or the error message of a diverged run.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
    pub cells: Vec<GridCell>,
}

/// Trains one model per (alpha, beta) cell and picks the best validation
/// score; ties go to the lexicographically smaller (alpha, beta). Cells
/// whose run fails are recorded and skipped.
pub fn grid_search<D: DataAccess>(
    data: &D,
    splits: &SplitSpec,
    net: &NetConfig,
    cfg: &TrainConfig,
    alpha_grid: &[f64],
    beta_grid: &[f64],
) -> Result<GridResult> {
    if alpha_grid.is_empty() || beta_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty alpha and beta grids".into()));
    }
    let mut cells = Vec::new();
    for &alpha in alpha_grid {
        for &beta in beta_grid {
            let cell_cfg = TrainConfig {
                hyper: HyperParams {
                    alpha,
                    beta,
                    ..cfg.hyper.clone()
                },
                ..cfg.clone()
            };
            let outcome = train(data, splits, net, Variant::SpAen, &cell_cfg)
                .map(|(state, _)| state.best_val)
                .map_err(|e| e.to_string());
            cells.push(GridCell { alpha, beta, outcome });
        }
    }
    let best = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|s| (c, *s)))
        .filter(|(_, s)| s.is_finite())
        .min_by(|(a, sa), (b, sb)| {
            sb.total_cmp(sa)
                .then(a.alpha.total_cmp(&b.alpha))
                .then(a.beta.total_cmp(&b.beta))
        })
        .map(|(c, s)| (c.alpha, c.beta, s));
    match best {
        Some((alpha, beta, score)) => Ok(GridResult {
            alpha,
            beta,
            score,
            cells,
        }),
        None => Err(Error::InvalidInput("every grid cell failed".into())),
    }
}
