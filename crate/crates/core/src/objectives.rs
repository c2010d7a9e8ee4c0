//! Training losses: the margin ranking loss on `E`, perceptual plus pixel
//! reconstruction through `G`, the critic/embedder adversarial pair, and
//! their weighted sum.
//!
//! Batch-level functions return the mean over the batch together with the
//! gradient of that mean with respect to their inputs, so that callers can
//! continue the backward pass through whichever map produced the inputs.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nets::{ModelBundle, ParamMap, Variant};
use crate::spaces::{ClassEmbedding, EmbeddingTable};

/// How the wrong labels of the ranking loss are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankingMode {
    /// Sum the hinge over every wrong label.
    FullSum,
    /// One wrong label drawn uniformly per example from the given seed.
    Sampled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvForm {
    /// Wasserstein critic with weight clipping.
    Wgan,
    /// Log-probability discriminator, `log D(F(x)) + log(1 - D(E(x')))`.
    Log,
}

impl std::str::FromStr for AdvForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wgan" => Ok(AdvForm::Wgan),
            "log" => Ok(AdvForm::Log),
            _ => Err(Error::Config(format!("unknown adversarial form {s:?} (expected wgan or log)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsSampling {
    FullSum,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub margin: f64,
    pub lambda_p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub clip_c: f64,
    pub n_critic: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub momentum: f64,
    /// Per-map cap on the L2 norm of a generator-side gradient; `None`
    /// leaves gradients untouched.
    pub grad_clip_norm: Option<f64>,
    pub batch_size: usize,
    pub cls_sampling: ClsSampling,
    pub adv_form: AdvForm,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            margin: 0.1,
            lambda_p: 1.0,
            alpha: 10.0,
            beta: 5.0,
            clip_c: 0.01,
            n_critic: 5,
            learning_rate: 1e-2,
            critic_learning_rate: 5e-3,
            momentum: 0.9,
            grad_clip_norm: Some(5.0),
            batch_size: 32,
            cls_sampling: ClsSampling::Sampled,
            adv_form: AdvForm::Wgan,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.margin > 0.0, "margin must be > 0"),
            (self.lambda_p >= 0.0, "lambda_p must be >= 0"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.clip_c > 0.0, "clip_c must be > 0"),
            (self.learning_rate > 0.0, "learning rate must be > 0"),
            (self.critic_learning_rate > 0.0, "critic learning rate must be > 0"),
            ((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)"),
            (self.batch_size > 0, "batch size must be > 0"),
            (
                self.grad_clip_norm.is_none_or(|c| c > 0.0),
                "gradient clip norm must be > 0",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Per-term loss values of one batch. `rec = feat + lambda_p * pixel` and
/// `total = cls + alpha * rec + beta * adv_e`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub feat: f64,
    pub pixel: f64,
    pub rec: f64,
    pub adv_e: f64,
    pub adv_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(cls: f64, feat: f64, pixel: f64, adv_e: f64, adv_d: f64, hyper: &HyperParams) -> Self {
        let rec = feat + hyper.lambda_p * pixel;
        LossBreakdown {
            cls,
            feat,
            pixel,
            rec,
            adv_e,
            adv_d,
            total: cls + hyper.alpha * rec + hyper.beta * adv_e,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cls, self.feat, self.pixel, self.rec, self.adv_e, self.adv_d, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("feat", self.feat),
            ("pixel", self.pixel),
            ("adv_E", self.adv_e),
            ("adv_D", self.adv_d),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.cls += weight * other.cls;
        self.feat += weight * other.feat;
        self.pixel += weight * other.pixel;
        self.rec += weight * other.rec;
        self.adv_e += weight * other.adv_e;
        self.adv_d += weight * other.adv_d;
        self.total += weight * other.total;
    }
}

// ---------------------------------------------------------------------------
// ranking loss

fn hinge_terms(
    embedding: ArrayView1<f64>,
    correct: ArrayView1<f64>,
    wrong: &[ArrayView1<f64>],
    margin: f64,
) -> Vec<f64> {
    let pos = correct.dot(&embedding);
    wrong
        .iter()
        .map(|w| (margin - pos + w.dot(&embedding)).max(0.0))
        .collect()
}

/// Ranking loss of one embedding against its class and the wrong classes.
pub fn cls_loss(
    embedding: ArrayView1<f64>,
    correct: &ClassEmbedding,
    wrong: &[ClassEmbedding],
    margin: f64,
    mode: RankingMode,
) -> Result<f64> {
    if wrong.is_empty() {
        return Err(Error::InvalidInput("ranking loss needs at least one wrong label".into()));
    }
    let d = embedding.len();
    if correct.vector.len() != d || wrong.iter().any(|w| w.vector.len() != d) {
        return Err(Error::shape("cls_loss", d, "mismatched class embedding"));
    }
    let views: Vec<ArrayView1<f64>> = match mode {
        RankingMode::FullSum => wrong.iter().map(|w| w.vector.view()).collect(),
        RankingMode::Sampled(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![wrong[rng.random_range(0..wrong.len())].vector.view()]
        }
    };
    Ok(hinge_terms(embedding, correct.vector.view(), &views, margin)
        .into_iter()
        .sum())
}

/// Mean ranking loss over a batch and its gradient with respect to the
/// embeddings. `labels` are class ids that must all be present in `table`;
/// every other class of the table is a wrong label.
pub fn cls_batch(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    table: &EmbeddingTable,
    margin: f64,
    mode: RankingMode,
) -> Result<(f64, Array2<f64>)> {
    if table.len() < 2 {
        return Err(Error::InvalidInput("ranking loss needs at least two classes".into()));
    }
    if embeddings.ncols() != table.dim() {
        return Err(Error::shape("cls_loss", table.dim(), embeddings.ncols()));
    }
    let n = embeddings.nrows();
    let mut rng = match mode {
        RankingMode::Sampled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        RankingMode::FullSum => None,
    };
    let mut total = 0.0;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    for (i, (e, &label)) in embeddings.rows().into_iter().zip(labels).enumerate() {
        let row = table.index_of(label).ok_or_else(|| {
            Error::Contract(format!("label {label} is not a training class"))
        })?;
        let y = table.vectors.row(row);
        let pos = y.dot(&e);
        let wrong: Vec<usize> = match rng.as_mut() {
            Some(rng) => {
                let mut pick = rng.random_range(0..table.len() - 1);
                if pick >= row {
                    pick += 1;
                }
                vec![pick]
            }
            None => (0..table.len()).filter(|&r| r != row).collect(),
        };
        for w in wrong {
            let yw = table.vectors.row(w);
            let term = margin - pos + yw.dot(&e);
            if term > 0.0 {
                total += term;
                let mut g = grad.row_mut(i);
                g.scaled_add(1.0, &yw);
                g.scaled_add(-1.0, &y);
            }
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    grad *= scale;
    Ok((total * scale, grad))
}

// ---------------------------------------------------------------------------
// reconstruction

fn check_same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    Ok(())
}

/// `||recon - target||^2` summed over every pixel and channel.
pub fn pixel_loss(recon: &Image, target: &Image) -> Result<f64> {
    check_same_shape(recon, target, "pixel_loss")?;
    Ok(recon
        .pixels()
        .iter()
        .zip(target.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `||phi(recon) - phi(target)||^2`.
pub fn feat_loss(recon: &Image, target: &Image, phi: &ParamMap) -> Result<f64> {
    check_same_shape(recon, target, "feat_loss")?;
    let (h, w, c) = recon.shape();
    let both = Array2::from_shape_vec((2, h * w * c), [recon.to_chw(), target.to_chw()].concat())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let feats = phi.forward(both.view())?;
    let diff = &feats.row(0) - &feats.row(1);
    Ok(diff.dot(&diff))
}

pub fn rec_loss(recon: &Image, target: &Image, phi: &ParamMap, lambda_p: f64) -> Result<f64> {
    Ok(feat_loss(recon, target, phi)? + lambda_p * pixel_loss(recon, target)?)
}

/// Batch means of the feature and pixel terms, and the gradient of
/// `feat + lambda_p * pixel` with respect to `recon`. `target_features`
/// may carry precomputed `phi(target)`.
pub fn rec_batch(
    recon: ArrayView2<f64>,
    target: ArrayView2<f64>,
    target_features: Option<ArrayView2<f64>>,
    phi: &ParamMap,
    lambda_p: f64,
) -> Result<(f64, f64, Array2<f64>)> {
    if recon.dim() != target.dim() {
        return Err(Error::shape(
            "rec_loss",
            format!("{:?}", target.dim()),
            format!("{:?}", recon.dim()),
        ));
    }
    let scale = 1.0 / recon.nrows().max(1) as f64;
    let diff = &recon - &target;
    let pixel = diff.iter().map(|v| v * v).sum::<f64>() * scale;
    let mut grad = diff * (2.0 * lambda_p * scale);

    let (feats, tape) = phi.forward_taped(recon)?;
    let target_feats = match target_features {
        Some(t) => t.to_owned(),
        None => phi.forward(target)?,
    };
    let fdiff = &feats - &target_feats;
    let feat = fdiff.iter().map(|v| v * v).sum::<f64>() * scale;
    let dfeat = fdiff * (2.0 * scale);
    grad += &phi.backward_input(&tape, dfeat.view())?;
    Ok((feat, pixel, grad))
}

// ---------------------------------------------------------------------------
// adversarial

fn check_batch(batch: ArrayView2<f64>, what: &str) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::InvalidInput(format!("{what}: empty batch")));
    }
    Ok(())
}

fn mean_output(d: &ParamMap, batch: ArrayView2<f64>) -> Result<f64> {
    let out = d.forward(batch)?;
    Ok(out.sum() / out.nrows() as f64)
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Wasserstein critic loss `mean D(fake) - mean D(real)`, minimised by the
/// critic. `real` holds `F(x)` embeddings, `fake` holds `E(x')`.
pub fn adv_critic_loss(d: &ParamMap, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64> {
    check_batch(real, "adv_critic_loss")?;
    check_batch(fake, "adv_critic_loss")?;
    Ok(mean_output(d, fake)? - mean_output(d, real)?)
}

/// `-mean D(fake)`: the embedder's side of the Wasserstein game.
pub fn adv_embedder_loss(d: &ParamMap, fake: ArrayView2<f64>) -> Result<f64> {
    check_batch(fake, "adv_embedder_loss")?;
    Ok(-mean_output(d, fake)?)
}

/// Negated log-form objective, `-(mean log D(real) + mean log(1 - D(fake)))`,
/// with `D` emitting a logit.
pub fn adv_critic_loss_log(d: &ParamMap, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64> {
    check_batch(real, "adv_critic_loss")?;
    check_batch(fake, "adv_critic_loss")?;
    let r = d.forward(real)?;
    let f = d.forward(fake)?;
    let real_term = r.iter().map(|&z| log_sigmoid(z)).sum::<f64>() / r.len() as f64;
    let fake_term = f.iter().map(|&z| log_sigmoid(-z)).sum::<f64>() / f.len() as f64;
    Ok(-(real_term + fake_term))
}

/// `mean log(1 - D(fake))`, minimised by the embedder.
pub fn adv_embedder_loss_log(d: &ParamMap, fake: ArrayView2<f64>) -> Result<f64> {
    check_batch(fake, "adv_embedder_loss")?;
    let f = d.forward(fake)?;
    Ok(f.iter().map(|&z| log_sigmoid(-z)).sum::<f64>() / f.len() as f64)
}

/// Critic loss and its gradient with respect to the critic's parameters.
pub fn critic_grads(
    d: &ParamMap,
    real: ArrayView2<f64>,
    fake: ArrayView2<f64>,
    form: AdvForm,
) -> Result<(f64, Vec<f64>)> {
    check_batch(real, "adv_critic_loss")?;
    check_batch(fake, "adv_critic_loss")?;
    let both = concatenate(Axis(0), &[fake, real]).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let (out, tape) = d.forward_taped(both.view())?;
    let nf = fake.nrows();
    let nr = real.nrows();
    let mut dout = Array2::zeros(out.raw_dim());
    let value = match form {
        AdvForm::Wgan => {
            dout.slice_mut(s![..nf, ..]).fill(1.0 / nf as f64);
            dout.slice_mut(s![nf.., ..]).fill(-1.0 / nr as f64);
            out.slice(s![..nf, ..]).sum() / nf as f64 - out.slice(s![nf.., ..]).sum() / nr as f64
        }
        AdvForm::Log => {
            let mut v = 0.0;
            for (i, &z) in out.column(0).iter().enumerate() {
                if i < nf {
                    v -= log_sigmoid(-z) / nf as f64;
                    dout[[i, 0]] = sigmoid(z) / nf as f64;
                } else {
                    v -= log_sigmoid(z) / nr as f64;
                    dout[[i, 0]] = -(1.0 - sigmoid(z)) / nr as f64;
                }
            }
            v
        }
    };
    let (_, grads) = d.backward(&tape, dout.view())?;
    Ok((value, grads))
}

/// Embedder-side adversarial loss and its gradient with respect to `fake`;
/// the critic is held constant.
pub fn embedder_adv_grads(
    d: &ParamMap,
    fake: ArrayView2<f64>,
    form: AdvForm,
) -> Result<(f64, Array2<f64>)> {
    check_batch(fake, "adv_embedder_loss")?;
    let n = fake.nrows() as f64;
    let (out, tape) = d.forward_taped(fake)?;
    let mut dout = Array2::zeros(out.raw_dim());
    let value = match form {
        AdvForm::Wgan => {
            dout.fill(-1.0 / n);
            -out.sum() / n
        }
        AdvForm::Log => {
            let mut v = 0.0;
            for (i, &z) in out.column(0).iter().enumerate() {
                v += log_sigmoid(-z) / n;
                dout[[i, 0]] = -sigmoid(z) / n;
            }
            v
        }
    };
    Ok((value, d.backward_input(&tape, dout.view())?))
}

// ---------------------------------------------------------------------------
// full objective

/// A training batch: images as CHW rows, their frozen-trunk features and
/// class ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array2<f64>,
    pub trunk: Array2<f64>,
    pub labels: Vec<usize>,
    /// Optional cache of `phi(images)`.
    pub phi_features: Option<Array2<f64>>,
}

impl Batch {
    pub fn new(bundle: &ModelBundle, images: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let trunk = bundle.trunk_features(images.view())?;
        Ok(Batch {
            images,
            trunk,
            labels,
            phi_features: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Flat parameter gradients keyed by map name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    /// Zero gradients for every trainable map of `bundle`.
    pub fn zeros(bundle: &ModelBundle) -> Self {
        Gradients(
            bundle
                .maps()
                .into_iter()
                .filter(|m| m.trainable)
                .map(|m| (m.name.clone(), vec![0.0; m.num_params()]))
                .collect(),
        )
    }

    pub fn add(&mut self, name: &str, grads: &[f64], weight: f64) {
        let slot = self
            .0
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grads.len()]);
        for (a, b) in slot.iter_mut().zip(grads) {
            *a += weight * b;
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn merge(&mut self, other: &Gradients, weight: f64) {
        for (name, g) in &other.0 {
            self.add(name, g, weight);
        }
    }

    /// Largest absolute entry of the named map's gradient (0 if absent).
    pub fn max_abs(&self, name: &str) -> f64 {
        self.get(name)
            .map(|g| g.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
            .unwrap_or(0.0)
    }
}

/// Each objective term's value and its separate gradient. Terms are kept
/// apart so callers can inspect which parameters each one reaches.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub losses: LossBreakdown,
    pub cls: Gradients,
    pub rec: Gradients,
    pub adv: Gradients,
}

impl TermGradients {
    /// `cls + alpha * rec + beta * adv`.
    pub fn total(&self, hyper: &HyperParams) -> Gradients {
        let mut g = self.cls.clone();
        g.merge(&self.rec, hyper.alpha);
        g.merge(&self.adv, hyper.beta);
        g
    }
}

fn check_training_labels(batch: &Batch, table: &EmbeddingTable) -> Result<()> {
    if let Some(l) = batch.labels.iter().find(|l| table.index_of(**l).is_none()) {
        return Err(Error::Contract(format!(
            "label {l} in a training batch is not a training class"
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    Ok(())
}

/// Loss values of the weighted objective for `bundle.variant` on `batch`.
pub fn full_objective(
    bundle: &ModelBundle,
    batch: &Batch,
    table: &EmbeddingTable,
    hyper: &HyperParams,
    mode: RankingMode,
) -> Result<LossBreakdown> {
    Ok(term_gradients(bundle, batch, table, hyper, mode)?.losses)
}

/// Values and per-term gradients of the objective. What each term reads
/// depends on the variant:
///
/// * full model: `cls(E)`, `rec(G(F(x)))`, `adv(D(E(x)))` with `D` constant;
/// * cls-only: `cls(E)`;
/// * SAE and direct map: `cls(E)`, `rec(G(E(x)))`;
/// * split branch: `cls` on the first half of `E`, `rec` through both
///   branches and the merge layer.
pub fn term_gradients(
    bundle: &ModelBundle,
    batch: &Batch,
    table: &EmbeddingTable,
    hyper: &HyperParams,
    mode: RankingMode,
) -> Result<TermGradients> {
    check_training_labels(batch, table)?;
    let d = bundle.config.d;
    let mut cls_g = Gradients::zeros(bundle);
    let mut rec_g = Gradients::zeros(bundle);
    let mut adv_g = Gradients::zeros(bundle);

    let (head_out, head_tape) = bundle.e_head.forward_taped(batch.trunk.view())?;
    let embedding = bundle.classified_part(head_out.clone());

    let (cls, d_embed) = cls_batch(embedding.view(), &batch.labels, table, hyper.margin, mode)?;
    let mut d_head = Array2::zeros(head_out.raw_dim());
    d_head.slice_mut(s![.., ..d]).assign(&d_embed);
    let (_, g) = bundle.e_head.backward(&head_tape, d_head.view())?;
    cls_g.add(&bundle.e_head.name, &g, 1.0);

    let (mut feat, mut pixel, mut adv_e, mut adv_d) = (0.0, 0.0, 0.0, 0.0);
    let phi_cache = batch.phi_features.as_ref().map(|p| p.view());
    match bundle.variant {
        Variant::ClsOnly => {}
        Variant::SpAen => {
            let f = bundle.f.as_ref().expect("F");
            let g_map = bundle.g.as_ref().expect("G");
            let critic = bundle.d.as_ref().expect("D");

            let (code, f_tape) = f.forward_taped(batch.images.view())?;
            let (recon, g_tape) = g_map.forward_taped(code.view())?;
            let (fe, px, d_recon) =
                rec_batch(recon.view(), batch.images.view(), phi_cache, &bundle.phi, hyper.lambda_p)?;
            feat = fe;
            pixel = px;
            let (d_code, g_grads) = g_map.backward(&g_tape, d_recon.view())?;
            let (_, f_grads) = f.backward(&f_tape, d_code.view())?;
            rec_g.add(&g_map.name, &g_grads, 1.0);
            rec_g.add(&f.name, &f_grads, 1.0);

            let (value, d_fake) = embedder_adv_grads(critic, embedding.view(), hyper.adv_form)?;
            adv_e = value;
            adv_d = match hyper.adv_form {
                AdvForm::Wgan => adv_critic_loss(critic, code.view(), embedding.view())?,
                AdvForm::Log => adv_critic_loss_log(critic, code.view(), embedding.view())?,
            };
            let (_, g) = bundle.e_head.backward(&head_tape, d_fake.view())?;
            adv_g.add(&bundle.e_head.name, &g, 1.0);
        }
        Variant::Sae | Variant::DirectMap => {
            let g_map = bundle.g.as_ref().expect("G");
            let (recon, g_tape) = g_map.forward_taped(embedding.view())?;
            let (fe, px, d_recon) =
                rec_batch(recon.view(), batch.images.view(), phi_cache, &bundle.phi, hyper.lambda_p)?;
            feat = fe;
            pixel = px;
            let (d_code, g_grads) = g_map.backward(&g_tape, d_recon.view())?;
            rec_g.add(&g_map.name, &g_grads, 1.0);
            let (_, h) = bundle.e_head.backward(&head_tape, d_code.view())?;
            rec_g.add(&bundle.e_head.name, &h, 1.0);
        }
        Variant::SplitBranch => {
            let g_map = bundle.g.as_ref().expect("G");
            let br = bundle.branches.as_ref().expect("branches");
            let first = head_out.slice(s![.., ..d]);
            let second = head_out.slice(s![.., d..]);
            let (a, a_tape) = br.cls_branch.forward_taped(first)?;
            let (b, b_tape) = br.rec_branch.forward_taped(second)?;
            let cat = concatenate(Axis(1), &[a.view(), b.view()])
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            let (code, m_tape) = br.merge.forward_taped(cat.view())?;
            let (recon, g_tape) = g_map.forward_taped(code.view())?;
            let (fe, px, d_recon) =
                rec_batch(recon.view(), batch.images.view(), phi_cache, &bundle.phi, hyper.lambda_p)?;
            feat = fe;
            pixel = px;
            let (d_code, g_grads) = g_map.backward(&g_tape, d_recon.view())?;
            let (d_cat, m_grads) = br.merge.backward(&m_tape, d_code.view())?;
            let (d_first, a_grads) = br.cls_branch.backward(&a_tape, d_cat.slice(s![.., ..d]))?;
            let (d_second, b_grads) = br.rec_branch.backward(&b_tape, d_cat.slice(s![.., d..]))?;
            let d_head = concatenate(Axis(1), &[d_first.view(), d_second.view()])
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            let (_, h) = bundle.e_head.backward(&head_tape, d_head.view())?;
            rec_g.add(&g_map.name, &g_grads, 1.0);
            rec_g.add(&br.merge.name, &m_grads, 1.0);
            rec_g.add(&br.cls_branch.name, &a_grads, 1.0);
            rec_g.add(&br.rec_branch.name, &b_grads, 1.0);
            rec_g.add(&bundle.e_head.name, &h, 1.0);
        }
    }

    Ok(TermGradients {
        losses: LossBreakdown::compose(cls, feat, pixel, adv_e, adv_d, hyper),
        cls: cls_g,
        rec: rec_g,
        adv: adv_g,
    })
}

/// Convenience for single images: `(recon, target)` pairs as CHW rows.
pub fn image_rows(images: &[&Image]) -> Array2<f64> {
    crate::nets::images_to_batch(images.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_models, build_variant, random_matrix, Layer, NetConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array1};

    fn emb(id: usize, v: &[f64]) -> ClassEmbedding {
        ClassEmbedding {
            class_id: id,
            vector: arr1(v),
        }
    }

    #[test]
    fn ranking_loss_cases() {
        // embedding e = (1, 0): scores are first coordinates
        let e = arr1(&[1.0, 0.0]);
        let correct = emb(0, &[0.9, 0.1]);
        let l = cls_loss(e.view(), &correct, &[emb(1, &[0.2, 0.5])], 0.1, RankingMode::FullSum).unwrap();
        assert_eq!(l, 0.0);
        let tie = cls_loss(e.view(), &correct, &[emb(1, &[0.9, 0.3])], 0.25, RankingMode::FullSum).unwrap();
        assert_abs_diff_eq!(tie, 0.25, epsilon = 1e-15);
        let wrong = [emb(1, &[0.5, 0.0]), emb(2, &[0.7, 0.0]), emb(3, &[0.1, 0.0])];
        let l = cls_loss(e.view(), &emb(0, &[0.6, 0.0]), &wrong, 0.2, RankingMode::FullSum).unwrap();
        assert_abs_diff_eq!(l, 0.1 + 0.3, epsilon = 1e-12);
        assert!(cls_loss(e.view(), &correct, &[], 0.1, RankingMode::FullSum).is_err());
    }

    #[test]
    fn full_sum_equals_enumerated_sampled_mean_times_count() {
        let e = arr1(&[0.3, -0.2, 0.8]);
        let correct = emb(0, &[0.5, 0.5, 0.7071]);
        let wrong = [emb(1, &[1.0, 0.0, 0.0]), emb(2, &[0.0, 1.0, 0.0]), emb(3, &[0.0, 0.0, 1.0])];
        let full = cls_loss(e.view(), &correct, &wrong, 0.3, RankingMode::FullSum).unwrap();
        // enumerate every single-wrong-label choice
        let per_choice: Vec<f64> = wrong
            .iter()
            .map(|w| cls_loss(e.view(), &correct, std::slice::from_ref(w), 0.3, RankingMode::FullSum).unwrap())
            .collect();
        let mean = per_choice.iter().sum::<f64>() / 3.0;
        assert_abs_diff_eq!(mean * 3.0, full, epsilon = 1e-12);
        // a sampled draw is always one of the enumerated values
        for seed in 0..10 {
            let s = cls_loss(e.view(), &correct, &wrong, 0.3, RankingMode::Sampled(seed)).unwrap();
            assert!(per_choice.iter().any(|v| (v - s).abs() < 1e-15));
        }
    }

    #[test]
    fn pixel_loss_cases() {
        let a = Image::filled(2, 2, 3, 0.0);
        let b = Image::filled(2, 2, 3, 1.0);
        assert_eq!(pixel_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(pixel_loss(&a, &b).unwrap(), 12.0);
        let r = Image::new(2, 2, 1, vec![0.1, 0.7, 0.4, 0.9]).unwrap();
        let t = Image::new(2, 2, 1, vec![0.3, 0.2, 0.4, 1.0]).unwrap();
        let oracle = 0.2f64.powi(2) + 0.5f64.powi(2) + 0.0 + 0.1f64.powi(2);
        assert_abs_diff_eq!(pixel_loss(&r, &t).unwrap(), oracle, epsilon = 1e-15);
        assert!(pixel_loss(&r, &a).is_err());
    }

    fn tiny() -> NetConfig {
        NetConfig {
            d: 4,
            image_size: 8,
            trunk_channels: [2, 2],
            head_hidden: 5,
            f_channels: [2, 2],
            f_hidden: 5,
            g_channels: [2, 2, 2],
            critic_hidden: 3,
            phi_channels: [2, 3, 2],
            ..NetConfig::default()
        }
    }

    #[test]
    fn feat_loss_is_pixel_loss_in_feature_space() {
        let bundle = build_models(&tiny()).unwrap();
        let x = random_matrix(2, 8 * 8 * 3, 4);
        let a = Image::from_chw(8, 8, 3, x.row(0).as_slice().unwrap()).unwrap();
        let b = Image::from_chw(8, 8, 3, x.row(1).as_slice().unwrap()).unwrap();
        assert_eq!(feat_loss(&a, &a, &bundle.phi).unwrap(), 0.0);
        let fa = bundle.phi.forward(image_rows(&[&a]).view()).unwrap();
        let fb = bundle.phi.forward(image_rows(&[&b]).view()).unwrap();
        let oracle: f64 = fa.iter().zip(fb.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        assert_abs_diff_eq!(feat_loss(&a, &b, &bundle.phi).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn feat_loss_ignores_pixels_phi_discards() {
        // a 1x1 stride-2 convolution only reads even rows and columns
        let phi = ParamMap::new(
            "phi",
            vec![Layer::Conv {
                input: crate::nets::ConvGeometry {
                    channels: 3,
                    height: 4,
                    width: 4,
                    kernel: 1,
                    stride: 2,
                    padding: 0,
                },
                weight: Array2::ones((2, 3)),
                bias: Array1::zeros(2),
            }],
            false,
        )
        .unwrap();
        let a = Image::filled(4, 4, 3, 0.2);
        let target = Image::filled(4, 4, 3, 0.6);
        let mut px = a.pixels().to_vec();
        px[(4 + 1) * 3] = 0.9; // pixel (1, 1), never read
        let b = Image::new(4, 4, 3, px).unwrap();
        assert_eq!(feat_loss(&a, &target, &phi).unwrap(), feat_loss(&b, &target, &phi).unwrap());
    }

    #[test]
    fn rec_loss_composition() {
        let bundle = build_models(&tiny()).unwrap();
        let a = Image::filled(8, 8, 3, 0.3);
        let b = Image::filled(8, 8, 3, 0.5);
        for lp in [0.0, 1.0, 7.5] {
            assert_eq!(rec_loss(&a, &a, &bundle.phi, lp).unwrap(), 0.0);
        }
        assert_eq!(rec_loss(&a, &b, &bundle.phi, 0.0).unwrap(), feat_loss(&a, &b, &bundle.phi).unwrap());
        let hyper = HyperParams {
            lambda_p: 2.0,
            ..HyperParams::default()
        };
        let lb = LossBreakdown::compose(0.0, 0.3, 0.1, 0.0, 0.0, &hyper);
        assert_abs_diff_eq!(lb.rec, 0.5, epsilon = 1e-15);
    }

    fn linear_critic(w: f64, b: f64) -> ParamMap {
        ParamMap::new(
            "D",
            vec![Layer::Dense {
                weight: arr2(&[[w]]),
                bias: arr1(&[b]),
            }],
            true,
        )
        .unwrap()
    }

    #[test]
    fn adversarial_cases() {
        let constant = linear_critic(0.0, 0.7);
        let real = arr2(&[[1.0]]);
        let fake = arr2(&[[0.0]]);
        assert_eq!(adv_critic_loss(&constant, real.view(), fake.view()).unwrap(), 0.0);
        assert_eq!(adv_embedder_loss(&constant, fake.view()).unwrap(), -0.7);
        let identity = linear_critic(1.0, 0.0);
        assert_eq!(adv_critic_loss(&identity, real.view(), fake.view()).unwrap(), -1.0);
        // the batch on which D is largest gives the smallest embedder loss
        assert!(
            adv_embedder_loss(&identity, real.view()).unwrap()
                < adv_embedder_loss(&identity, fake.view()).unwrap()
        );
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(adv_critic_loss(&identity, empty.view(), fake.view()).is_err());
        assert!(adv_embedder_loss(&identity, empty.view()).is_err());
    }

    #[test]
    fn adversarial_matches_mean_oracle() {
        let cfg = tiny();
        let bundle = build_models(&cfg).unwrap();
        let critic = bundle.d.as_ref().unwrap();
        let real = random_matrix(5, 4, 1);
        let fake = random_matrix(3, 4, 2);
        let out_r = critic.forward(real.view()).unwrap();
        let out_f = critic.forward(fake.view()).unwrap();
        let oracle = out_f.iter().sum::<f64>() / 3.0 - out_r.iter().sum::<f64>() / 5.0;
        assert_abs_diff_eq!(adv_critic_loss(critic, real.view(), fake.view()).unwrap(), oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(
            adv_embedder_loss(critic, fake.view()).unwrap(),
            -out_f.iter().sum::<f64>() / 3.0,
            epsilon = 1e-14
        );
        let (v, _) = critic_grads(critic, real.view(), fake.view(), AdvForm::Wgan).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-14);
        let (v, _) = critic_grads(critic, real.view(), fake.view(), AdvForm::Log).unwrap();
        assert_abs_diff_eq!(v, adv_critic_loss_log(critic, real.view(), fake.view()).unwrap(), epsilon = 1e-14);
    }

    fn toy_batch(bundle: &ModelBundle) -> (Batch, EmbeddingTable) {
        let images = random_matrix(4, 8 * 8 * 3, 21);
        let attrs = random_matrix(3, 4, 22);
        let table = EmbeddingTable::from_attributes(attrs.view(), &[0, 1, 2]).unwrap();
        (Batch::new(bundle, images, vec![0, 2, 1, 2]).unwrap(), table)
    }

    #[test]
    fn objective_rejects_unseen_labels() {
        let bundle = build_models(&tiny()).unwrap();
        let (mut batch, table) = toy_batch(&bundle);
        batch.labels[1] = 7;
        let err = full_objective(&bundle, &batch, &table, &HyperParams::default(), RankingMode::FullSum);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_weights_leave_cls() {
        let bundle = build_models(&tiny()).unwrap();
        let (batch, table) = toy_batch(&bundle);
        let hyper = HyperParams {
            alpha: 0.0,
            beta: 0.0,
            ..HyperParams::default()
        };
        let lb = full_objective(&bundle, &batch, &table, &hyper, RankingMode::FullSum).unwrap();
        assert_eq!(lb.total, lb.cls);
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let bundle = build_models(&tiny()).unwrap();
        let (batch, table) = toy_batch(&bundle);
        let hyper = HyperParams {
            alpha: 3.0,
            beta: 2.0,
            lambda_p: 0.5,
            ..HyperParams::default()
        };
        let lb = full_objective(&bundle, &batch, &table, &hyper, RankingMode::FullSum).unwrap();

        // component oracles evaluated image by image
        let emb = bundle.embed(batch.images.view()).unwrap();
        let mut cls = 0.0;
        let mut rec = 0.0;
        let code = bundle.f.as_ref().unwrap().forward(batch.images.view()).unwrap();
        let recon = bundle.g.as_ref().unwrap().forward(code.view()).unwrap();
        for i in 0..4 {
            let row = table.index_of(batch.labels[i]).unwrap();
            let wrong: Vec<ClassEmbedding> =
                (0..3).filter(|&r| r != row).map(|r| table.embedding(r)).collect();
            cls += cls_loss(emb.row(i), &table.embedding(row), &wrong, hyper.margin, RankingMode::FullSum).unwrap();
            let r = Image::from_chw(8, 8, 3, recon.row(i).as_slice().unwrap()).unwrap();
            let t = Image::from_chw(8, 8, 3, batch.images.row(i).as_slice().unwrap()).unwrap();
            rec += rec_loss(&r, &t, &bundle.phi, hyper.lambda_p).unwrap();
        }
        let adv = adv_embedder_loss(bundle.d.as_ref().unwrap(), emb.view()).unwrap();
        let oracle = cls / 4.0 + hyper.alpha * rec / 4.0 + hyper.beta * adv;
        assert_abs_diff_eq!(lb.total, oracle, epsilon = 1e-10);
    }

    #[test]
    fn perfect_reconstruction_and_margins_leave_adversarial_term() {
        let hyper = HyperParams::default();
        let lb = LossBreakdown::compose(0.0, 0.0, 0.0, -0.37, 0.1, &hyper);
        assert_abs_diff_eq!(lb.total, hyper.beta * -0.37, epsilon = 1e-15);
    }

    #[test]
    fn terms_touch_disjoint_maps() {
        let bundle = build_models(&tiny()).unwrap();
        let (batch, table) = toy_batch(&bundle);
        let t = term_gradients(&bundle, &batch, &table, &HyperParams::default(), RankingMode::FullSum).unwrap();
        assert_eq!(t.cls.max_abs("F"), 0.0);
        assert_eq!(t.cls.max_abs("G"), 0.0);
        assert_eq!(t.rec.max_abs("E-head"), 0.0);
        assert!(t.rec.max_abs("F") > 0.0 && t.rec.max_abs("G") > 0.0);
        assert_eq!(t.adv.max_abs("F"), 0.0);
        assert_eq!(t.adv.max_abs("D"), 0.0);

        // the shared encoder of the SAE wiring is reached by reconstruction
        let sae = build_variant(&tiny(), Variant::Sae).unwrap();
        let t = term_gradients(&sae, &batch, &table, &HyperParams::default(), RankingMode::FullSum).unwrap();
        assert!(t.rec.max_abs("E-head") > 0.0);
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        for bad in [
            HyperParams { margin: 0.0, ..HyperParams::default() },
            HyperParams { clip_c: -1.0, ..HyperParams::default() },
            HyperParams { alpha: -1.0, ..HyperParams::default() },
            HyperParams { batch_size: 0, ..HyperParams::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
    proptest::proptest! {
        #[test]
        fn full_sum_dominates_sampled_and_both_are_non_negative(
            values in proptest::collection::vec(-2.0f64..2.0, 12),
            attrs in proptest::collection::vec(-1.0f64..1.0, 16),
            margin in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let ids = [0usize, 1, 2, 3];
            let rows = Array2::from_shape_vec((4, 4), attrs).unwrap();
            proptest::prop_assume!(rows.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
            let table = EmbeddingTable::from_rows(&ids, |c| rows.row(c)).unwrap();
            let emb = Array2::from_shape_vec((3, 4), values).unwrap();
            let labels = [0, 2, 3];
            let (full, _) = cls_batch(emb.view(), &labels, &table, margin, RankingMode::FullSum).unwrap();
            let (sampled, _) = cls_batch(emb.view(), &labels, &table, margin, RankingMode::Sampled(seed)).unwrap();
            proptest::prop_assert!(sampled >= 0.0);
            proptest::prop_assert!(full >= sampled - 1e-12);
        }

        #[test]
        fn reconstruction_terms_vanish_only_at_the_target(
            target in proptest::collection::vec(-1.0f64..1.0, 8 * 8 * 3),
            shift in 0.01f64..1.0,
        ) {
            let phi = crate::nets::build_phi(&tiny()).unwrap();
            let t = Array2::from_shape_vec((1, 8 * 8 * 3), target).unwrap();
            let (feat, pixel, _) = rec_batch(t.view(), t.view(), None, &phi, 1.0).unwrap();
            proptest::prop_assert_eq!((feat, pixel), (0.0, 0.0));
            let r = t.mapv(|v| v + shift);
            let (feat, pixel, _) = rec_batch(r.view(), t.view(), None, &phi, 1.0).unwrap();
            proptest::prop_assert!(feat >= 0.0);
            proptest::prop_assert!((pixel - shift * shift * (8 * 8 * 3) as f64).abs() < 1e-9);
        }
    }
}
