//! Trainable layers and parameter bookkeeping.
//!
//! Parameters live in a flat [`ParamStore`] arena and layers hold
//! [`ParamId`] handles into it, which keeps borrow scopes simple: a forward
//! pass binds the needed parameters onto the tape (recording the pairing in
//! a [`Bindings`] list) and the training loop pulls gradients back through
//! the same list after backward.
//!
//! The normalization layer is where multi-view specialization happens: a
//! view-specific layer owns six (gamma, beta) banks — one per standard probe
//! position — and each sample in a batch is scaled/shifted by the bank of
//! its own view while all other weights stay shared.

use crate::tensor::{sgd_step, Param, Tape, Tensor, TensorError, Val};
use rand::Rng;
use thiserror::Error;

/// Number of standardized probe positions; view ids run 1..=NUM_VIEWS.
pub const NUM_VIEWS: usize = 6;
/// Variance-floor epsilon shared by both normalization flavours.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("unknown view id {0}; expected 1..={NUM_VIEWS}")]
    UnknownView(u8),
    #[error("got {got} view tags for a batch of {batch} samples")]
    ViewCountMismatch { got: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat arena of named parameters, in a stable insertion order that also
/// fixes checkpoint layout.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name() == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }

    /// One SGD update over every stored parameter.
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), TensorError> {
        let mut refs: Vec<&mut Param> = self.params.iter_mut().collect();
        sgd_step(&mut refs, lr)
    }
}

/// Pairings of bound tape leaves with their owning parameters, collected
/// during a forward pass.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(ParamId, Val)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a parameter's current value onto the tape as a tracked leaf.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Val {
        let val = tape.param(store.get(id));
        self.entries.push((id, val));
        val
    }

    /// Pull gradients off the tape (post-backward) and accumulate them into
    /// the owning parameters. Leaves the tape never reached keep zero
    /// contribution.
    pub fn apply_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for &(id, val) in &self.entries {
            if let Some(g) = tape.grad(val) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

/// 2-D convolution layer (square kernel).
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f64> =
            (0..c_out * c_in * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::from_vec(vec![c_out, c_in, k, k], w).expect("conv weight shape"),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![c_out]));
        ConvLayer { weight, bias, stride, pad }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Val,
    ) -> Result<Val, TensorError> {
        let w = binds.bind(tape, store, self.weight);
        let b = binds.bind(tape, store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer.
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        let w: Vec<f64> =
            (0..out_features * in_features).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::from_vec(vec![out_features, in_features], w).expect("dense weight shape"),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![out_features]));
        DenseLayer { weight, bias }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Val,
    ) -> Result<Val, TensorError> {
        let w = binds.bind(tape, store, self.weight);
        let b = binds.bind(tape, store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Instance => "instance",
            NormKind::Batch => "batch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "instance" => Some(NormKind::Instance),
            "batch" => Some(NormKind::Batch),
            _ => None,
        }
    }
}

/// Whether a forward pass uses batch statistics (training) or frozen
/// running statistics (evaluation). Instance normalization behaves
/// identically in both phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Normalization layer with per-view affine banks.
///
/// A view-specific layer owns [`NUM_VIEWS`] (gamma, beta) banks and selects
/// one per sample by view id; a plain layer owns a single shared bank. All
/// banks start identical (gamma = 1, beta = 0), so any view specialization
/// is learned rather than built in.
pub struct NormLayer {
    kind: NormKind,
    channels: usize,
    view_specific: bool,
    gammas: Vec<ParamId>,
    betas: Vec<ParamId>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl NormLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: NormKind,
        channels: usize,
        view_specific: bool,
    ) -> Self {
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        if view_specific {
            for v in 1..=NUM_VIEWS {
                gammas.push(store.add(
                    format!("{prefix}.view{v}.gamma"),
                    Tensor::filled(vec![channels], 1.0),
                ));
                betas.push(
                    store.add(format!("{prefix}.view{v}.beta"), Tensor::zeros(vec![channels])),
                );
            }
        } else {
            gammas
                .push(store.add(format!("{prefix}.shared.gamma"), Tensor::filled(vec![channels], 1.0)));
            betas.push(store.add(format!("{prefix}.shared.beta"), Tensor::zeros(vec![channels])));
        }
        NormLayer {
            kind,
            channels,
            view_specific,
            gammas,
            betas,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_view_specific(&self) -> bool {
        self.view_specific
    }

    /// The affine bank serving a given view: the view's own bank when
    /// view-specific, the shared bank otherwise.
    pub fn bank_for_view(&self, view: u8) -> Result<(ParamId, ParamId), LayerError> {
        if view == 0 || view as usize > NUM_VIEWS {
            return Err(LayerError::UnknownView(view));
        }
        let idx = if self.view_specific { view as usize - 1 } else { 0 };
        Ok((self.gammas[idx], self.betas[idx]))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.gammas.iter().chain(self.betas.iter()).copied()
    }

    /// Scalar parameter count of the affine banks.
    pub fn affine_value_count(&self) -> usize {
        (self.gammas.len() + self.betas.len()) * self.channels
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.channels);
        assert_eq!(var.len(), self.channels);
        self.running_mean = mean;
        self.running_var = var;
    }

    /// Normalize a `[N, C, H, W]` batch, selecting each sample's affine
    /// bank by its view id. Training-phase batch normalization also folds
    /// the batch statistics into the running estimates.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Val,
        views: &[u8],
        phase: Phase,
    ) -> Result<Val, LayerError> {
        let shape = tape.value(x).shape();
        let n = match shape.first() {
            Some(&n) if shape.len() == 4 => n,
            _ => {
                return Err(LayerError::Tensor(TensorError::ShapeMismatch {
                    op: "norm_layer",
                    detail: format!("input must be [N, C, H, W], got {shape:?}"),
                }))
            }
        };
        if views.len() != n {
            return Err(LayerError::ViewCountMismatch { got: views.len(), batch: n });
        }
        // Bind each distinct bank once and reuse the leaf across samples so
        // their gradient contributions accumulate in one place.
        let mut bound: [Option<(Val, Val)>; NUM_VIEWS] = [None; NUM_VIEWS];
        let mut gvals = Vec::with_capacity(n);
        let mut bvals = Vec::with_capacity(n);
        for &view in views {
            let (gamma, beta) = self.bank_for_view(view)?;
            let idx = if self.view_specific { view as usize - 1 } else { 0 };
            let (gv, bv) = *bound[idx].get_or_insert_with(|| {
                (binds.bind(tape, store, gamma), binds.bind(tape, store, beta))
            });
            gvals.push(gv);
            bvals.push(bv);
        }
        let out = match (self.kind, phase) {
            (NormKind::Instance, _) => tape.instance_norm(x, &gvals, &bvals, NORM_EPS)?,
            (NormKind::Batch, Phase::Train) => {
                let (y, mean, var) = tape.batch_norm_train(x, &gvals, &bvals, NORM_EPS)?;
                for c in 0..self.channels {
                    self.running_mean[c] =
                        (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                    self.running_var[c] =
                        (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c];
                }
                y
            }
            (NormKind::Batch, Phase::Eval) => tape.batch_norm_eval(
                x,
                &gvals,
                &bvals,
                &self.running_mean,
                &self.running_var,
                NORM_EPS,
            )?,
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn instance_forward(
        layer: &mut NormLayer,
        store: &ParamStore,
        x: Tensor,
        views: &[u8],
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.constant(x);
        let y = layer.forward(&mut tape, store, &mut binds, xv, views, Phase::Eval).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn banks_start_identical() {
        let mut store = ParamStore::new();
        let layer = NormLayer::new(&mut store, "n", NormKind::Instance, 4, true);
        assert_eq!(layer.affine_value_count(), NUM_VIEWS * 2 * 4);
        let (g1, b1) = layer.bank_for_view(1).unwrap();
        for v in 2..=NUM_VIEWS as u8 {
            let (g, b) = layer.bank_for_view(v).unwrap();
            assert_eq!(store.get(g).value(), store.get(g1).value());
            assert_eq!(store.get(b).value(), store.get(b1).value());
        }
        assert!(store.get(g1).value().data().iter().all(|&v| v == 1.0));
        assert!(store.get(b1).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bank_selection_is_positional() {
        let mut store = ParamStore::new();
        let layer = NormLayer::new(&mut store, "n", NormKind::Instance, 2, true);
        let (g3, _) = layer.bank_for_view(3).unwrap();
        assert_eq!(store.get(g3).name(), "n.view3.gamma");
        assert!(matches!(layer.bank_for_view(7), Err(LayerError::UnknownView(7))));
        assert!(matches!(layer.bank_for_view(0), Err(LayerError::UnknownView(0))));
    }

    #[test]
    fn shared_layer_serves_one_bank_for_all_views() {
        let mut store = ParamStore::new();
        let layer = NormLayer::new(&mut store, "n", NormKind::Instance, 2, false);
        assert_eq!(layer.affine_value_count(), 2 * 2);
        let (g1, b1) = layer.bank_for_view(1).unwrap();
        let (g6, b6) = layer.bank_for_view(6).unwrap();
        assert_eq!(g1, g6);
        assert_eq!(b1, b6);
    }

    #[test]
    fn instance_norm_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Instance, 3, true);
        // make banks distinct so the test is not vacuous
        for id in layer.param_ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let jitter: Vec<f64> =
                p.value().data().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
            *p.value_mut() = Tensor::from_vec(p.value().shape().to_vec(), jitter).unwrap();
        }
        let batch = random_tensor(&mut rng, vec![3, 3, 4, 4]);
        let views = [2u8, 5, 2];
        let full = instance_forward(&mut layer, &store, batch.clone(), &views);
        // run sample 1 alone
        let per = 3 * 4 * 4;
        let solo_in =
            Tensor::from_vec(vec![1, 3, 4, 4], batch.data()[per..2 * per].to_vec()).unwrap();
        let solo = instance_forward(&mut layer, &store, solo_in, &[5]);
        for (a, b) in full[per..2 * per].iter().zip(&solo) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn duplicating_a_sample_is_a_noop_under_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Instance, 2, false);
        let sample = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let mut doubled = sample.data().to_vec();
        doubled.extend_from_slice(sample.data());
        let doubled = Tensor::from_vec(vec![2, 2, 3, 3], doubled).unwrap();
        let single = instance_forward(&mut layer, &store, sample, &[1]);
        let both = instance_forward(&mut layer, &store, doubled, &[1, 1]);
        for (a, b) in both[..single.len()].iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_norm_couples_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Batch, 2, false);
        let a = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let b1 = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let b2 = random_tensor(&mut rng, vec![1, 2, 3, 3]);
        let run = |layer: &mut NormLayer, store: &ParamStore, other: &Tensor| {
            let mut joined = a.data().to_vec();
            joined.extend_from_slice(other.data());
            let x = Tensor::from_vec(vec![2, 2, 3, 3], joined).unwrap();
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let xv = tape.constant(x);
            let y = layer
                .forward(&mut tape, store, &mut binds, xv, &[1, 1], Phase::Train)
                .unwrap();
            tape.value(y).data()[..18].to_vec()
        };
        let with_b1 = run(&mut layer, &store, &b1);
        let with_b2 = run(&mut layer, &store, &b2);
        let max_diff = with_b1
            .iter()
            .zip(&with_b2)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "replacing a batch mate moved sample 0 by only {max_diff:e}");
    }

    #[test]
    fn running_stats_follow_momentum_update() {
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Batch, 1, false);
        // batch mean 1 (constant field), variance 0
        let x = Tensor::filled(vec![1, 1, 2, 2], 1.0);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.constant(x);
        layer.forward(&mut tape, &store, &mut binds, xv, &[1], Phase::Train).unwrap();
        let (rm, rv) = layer.running_stats();
        assert!((rm[0] - 0.1).abs() < 1e-15); // 0.9 * 0 + 0.1 * 1
        assert!((rv[0] - 0.9).abs() < 1e-15); // 0.9 * 1 + 0.1 * 0
    }

    #[test]
    fn pre_affine_instance_norm_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Instance, 2, false);
        let x = random_tensor(&mut rng, vec![2, 2, 8, 8]);
        // per-plane population variance of the raw input, for the eps-shrink check
        let hw = 64;
        let mut plane_vars = Vec::new();
        for p in 0..4 {
            let plane = &x.data()[p * hw..(p + 1) * hw];
            let m: f64 = plane.iter().sum::<f64>() / hw as f64;
            plane_vars.push(plane.iter().map(|v| (v - m).powi(2)).sum::<f64>() / hw as f64);
        }
        let y = instance_forward(&mut layer, &store, x, &[1, 4]);
        for p in 0..4 {
            let plane = &y[p * hw..(p + 1) * hw];
            let m: f64 = plane.iter().sum::<f64>() / hw as f64;
            let v: f64 = plane.iter().map(|a| (a - m).powi(2)).sum::<f64>() / hw as f64;
            assert!(m.abs() < 1e-9, "plane {p} mean {m:e}");
            let expected = plane_vars[p] / (plane_vars[p] + NORM_EPS);
            assert!((v - expected).abs() < 1e-6, "plane {p} var {v} vs {expected}");
        }
    }

    #[test]
    fn view_swap_changes_output_only_for_distinct_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Instance, 2, true);
        let x = random_tensor(&mut rng, vec![1, 2, 4, 4]);
        // identical banks: view swap is invisible
        let y1 = instance_forward(&mut layer, &store, x.clone(), &[1]);
        let y2 = instance_forward(&mut layer, &store, x.clone(), &[2]);
        assert_eq!(y1, y2);
        // perturb bank 2: swap now matters, and view 1 is untouched
        let (g2, _) = layer.bank_for_view(2).unwrap();
        *store.get_mut(g2).value_mut() = Tensor::filled(vec![2], 1.7);
        let y1_after = instance_forward(&mut layer, &store, x.clone(), &[1]);
        let y2_after = instance_forward(&mut layer, &store, x, &[2]);
        assert_eq!(y1, y1_after);
        assert!(y1_after.iter().zip(&y2_after).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn vsp_layer_pinned_to_one_view_matches_plain_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut vsp_store = ParamStore::new();
        let mut vsp = NormLayer::new(&mut vsp_store, "n", NormKind::Instance, 3, true);
        // give view 4's bank distinctive values
        let (g4, b4) = vsp.bank_for_view(4).unwrap();
        let gamma = random_tensor(&mut rng, vec![3]);
        let beta = random_tensor(&mut rng, vec![3]);
        *vsp_store.get_mut(g4).value_mut() = gamma.clone();
        *vsp_store.get_mut(b4).value_mut() = beta.clone();

        let mut plain_store = ParamStore::new();
        let mut plain = NormLayer::new(&mut plain_store, "n", NormKind::Instance, 3, false);
        let (g, b) = plain.bank_for_view(1).unwrap();
        *plain_store.get_mut(g).value_mut() = gamma;
        *plain_store.get_mut(b).value_mut() = beta;

        let x = random_tensor(&mut rng, vec![2, 3, 4, 4]);
        let from_vsp = instance_forward(&mut vsp, &vsp_store, x.clone(), &[4, 4]);
        let from_plain = instance_forward(&mut plain, &plain_store, x, &[2, 6]);
        assert_eq!(from_vsp, from_plain);
    }

    #[test]
    fn view_count_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let mut layer = NormLayer::new(&mut store, "n", NormKind::Instance, 1, false);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.constant(Tensor::zeros(vec![2, 1, 2, 2]));
        let err = layer
            .forward(&mut tape, &store, &mut binds, x, &[1], Phase::Eval)
            .unwrap_err();
        assert!(matches!(err, LayerError::ViewCountMismatch { got: 1, batch: 2 }));
    }

    #[test]
    fn gradients_flow_back_through_bindings() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut store = ParamStore::new();
        let dense = DenseLayer::new(&mut store, "head", 3, 1, &mut rng);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = dense.forward(&mut tape, &store, &mut binds, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        binds.apply_grads(&tape, &mut store);
        assert_eq!(store.get(dense.weight).grad(), &[1.0, 2.0, 3.0]);
        assert_eq!(store.get(dense.bias).grad(), &[1.0]);
    }
}
