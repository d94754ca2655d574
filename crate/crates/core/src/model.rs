//! Topology, heterogeneous-parameter and homogeneous-parameter embedders
//! fused by element-wise summation and decoded by one affine layer.
//!
//! Each embedder is a stack of affine layers. Hidden layers are followed by
//! LeakyReLU and dropout; the last layer of every stack is followed by tanh
//! and no dropout. The decoder maps the fused `p`-dimensional latent to one
//! value per query row with no activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, LayerCache, Matrix, Mode};

pub const TOPO_FEATURES: usize = 4;
pub const HETERO_FEATURES: usize = 4;
pub const HOMO_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub te_dims: Vec<usize>,
    pub hepe_dims: Vec<usize>,
    pub hope_dims: Vec<usize>,
    pub p: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::scaled(512, 32, 250)
    }
}

impl ModelConfig {
    /// Paper-shaped stacks with four hidden layers in TE/HePE of `width`,
    /// three hidden layers in HoPE of `hope_width`, and latent size `p`.
    pub fn scaled(width: usize, hope_width: usize, p: usize) -> Self {
        Self {
            te_dims: vec![TOPO_FEATURES, width, width, width, width, p],
            hepe_dims: vec![HETERO_FEATURES, width, width, width, width, p],
            hope_dims: vec![HOMO_FEATURES, hope_width, hope_width, hope_width, p],
            p,
            dropout_rate: 0.3,
            leaky_slope: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dims) in [
            ("te_dims", &self.te_dims),
            ("hepe_dims", &self.hepe_dims),
            ("hope_dims", &self.hope_dims),
        ] {
            if dims.len() < 2 {
                return Err(Error::Config(format!(
                    "{name} needs at least an input and an output width, got {dims:?}"
                )));
            }
            if dims.contains(&0) {
                return Err(Error::Config(format!("{name} has a zero width: {dims:?}")));
            }
            if *dims.last().unwrap() != self.p {
                return Err(Error::Config(format!(
                    "{name} must end in p = {}, got {dims:?}",
                    self.p
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// One affine layer; `weight` is `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut d = Self::zeros(in_dim, out_dim);
        for w in d.weight.data_mut() {
            *w = rng.gen_range(-bound..=bound);
        }
        for b in &mut d.bias {
            *b = rng.gen_range(-bound..=bound);
        }
        d
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        (self.in_dim() + 1) * self.out_dim()
    }

    pub fn mac_count(&self) -> usize {
        self.in_dim() * self.out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub layers: Vec<Dense>,
}

struct HiddenCaches {
    affine: LayerCache,
    act: LayerCache,
    drop: LayerCache,
}

struct EmbedderTape {
    hidden: Vec<HiddenCaches>,
    last_affine: LayerCache,
    last_tanh: LayerCache,
}

impl Embedder {
    fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn eval(&self, x: &Matrix, slope: f64) -> Result<Matrix> {
        let (last, hidden) = self.layers.split_last().expect("embedder has layers");
        let mut h = x.clone();
        for layer in hidden {
            h = kernel::affine_apply(&layer.weight, &layer.bias, &h)?;
            h = kernel::leaky_relu_apply(&h, slope)?;
        }
        h = kernel::affine_apply(&last.weight, &last.bias, &h)?;
        Ok(kernel::tanh_apply(&h))
    }

    fn train<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        slope: f64,
        rate: f64,
        rng: &mut R,
    ) -> Result<(Matrix, EmbedderTape)> {
        let (last, hidden) = self.layers.split_last().expect("embedder has layers");
        let mut caches = Vec::with_capacity(hidden.len());
        let mut h = x.clone();
        for layer in hidden {
            let (z, affine) = kernel::affine_forward(&layer.weight, &layer.bias, &h)?;
            let (a, act) = kernel::leaky_relu(&z, slope)?;
            let (d, drop) = kernel::dropout(&a, rate, Mode::Train, rng)?;
            caches.push(HiddenCaches { affine, act, drop });
            h = d;
        }
        let (z, last_affine) = kernel::affine_forward(&last.weight, &last.bias, &h)?;
        let (y, last_tanh) = kernel::tanh_layer(&z)?;
        Ok((
            y,
            EmbedderTape {
                hidden: caches,
                last_affine,
                last_tanh,
            },
        ))
    }

    fn backward(&self, d_latent: &Matrix, tape: EmbedderTape) -> Result<Vec<Dense>> {
        let mut grads = vec![None; self.layers.len()];
        let last_idx = self.layers.len() - 1;
        let dz = kernel::tanh_backward(d_latent, tape.last_tanh)?;
        let g = kernel::affine_backward(&dz, &self.layers[last_idx].weight, tape.last_affine)?;
        grads[last_idx] = Some(Dense {
            weight: g.dw,
            bias: g.db,
        });
        let mut dh = g.dx;
        for (idx, c) in tape.hidden.into_iter().enumerate().rev() {
            let da = kernel::dropout_backward(&dh, c.drop)?;
            let dz = kernel::leaky_relu_backward(&da, c.act)?;
            let g = kernel::affine_backward(&dz, &self.layers[idx].weight, c.affine)?;
            grads[idx] = Some(Dense {
                weight: g.dw,
                bias: g.db,
            });
            dh = g.dx;
        }
        Ok(grads
            .into_iter()
            .map(|g| g.expect("every layer visited"))
            .collect())
    }
}

/// Normalized query points with their per-point and per-case features.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    /// `[n x 4]`: t, x, y, z.
    pub topo: Matrix,
    /// `[n x 4]`: porosity, ln kx, ln ky, ln kz at the query cell.
    pub hetero: Matrix,
    /// `[n x 2]`: injection rate and duration, repeated per row.
    pub homo: Matrix,
    pub target: Option<Matrix>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.topo.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> QueryBatch {
        QueryBatch {
            topo: self.topo.slice_rows(start, end),
            hetero: self.hetero.slice_rows(start, end),
            homo: self.homo.slice_rows(start, end),
            target: self.target.as_ref().map(|t| t.slice_rows(start, end)),
        }
    }
}

struct Tape {
    te: EmbedderTape,
    hepe: EmbedderTape,
    hope: EmbedderTape,
    decoder: LayerCache,
}

/// Gradients shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub te: Vec<Dense>,
    pub hepe: Vec<Dense>,
    pub hope: Vec<Dense>,
    pub decoder: Dense,
}

impl Gradients {
    /// Flat views in the same order as [`Model::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.te.iter().chain(&self.hepe).chain(&self.hope) {
            out.push(layer.weight.data());
            out.push(&layer.bias[..]);
        }
        out.push(self.decoder.weight.data());
        out.push(&self.decoder.bias[..]);
        out
    }
}

pub struct Model {
    config: ModelConfig,
    pub te: Embedder,
    pub hepe: Embedder,
    pub hope: Embedder,
    pub decoder: Dense,
    mode: Mode,
    tape: Option<Tape>,
}

impl Clone for Model {
    /// Clones parameters and mode; a pending backward tape is not copied.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            te: self.te.clone(),
            hepe: self.hepe.clone(),
            hope: self.hope.clone(),
            decoder: self.decoder.clone(),
            mode: self.mode,
            tape: None,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("mode", &self.mode)
            .field("params", &self.count_params())
            .finish()
    }
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let te = Embedder::init(&config.te_dims, &mut rng);
    let hepe = Embedder::init(&config.hepe_dims, &mut rng);
    let hope = Embedder::init(&config.hope_dims, &mut rng);
    let decoder = Dense::init(config.p, 1, &mut rng);
    Ok(Model {
        config: config.clone(),
        te,
        hepe,
        hope,
        decoder,
        mode: Mode::Train,
        tape: None,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Eval {
            self.tape = None;
        }
    }

    fn check_batch(&self, batch: &QueryBatch) -> Result<()> {
        let n = batch.topo.rows();
        let expect = [
            ("topo", &batch.topo, self.te.in_dim()),
            ("hetero", &batch.hetero, self.hepe.in_dim()),
            ("homo", &batch.homo, self.hope.in_dim()),
        ];
        for (name, m, width) in expect {
            if m.cols() != width {
                return Err(Error::dim(
                    "forward",
                    format!("{name} has {} columns, embedder expects {width}", m.cols()),
                ));
            }
            if m.rows() != n {
                return Err(Error::dim(
                    "forward",
                    format!("{name} has {} rows, topo has {n}", m.rows()),
                ));
            }
        }
        Ok(())
    }

    /// Eval-mode prediction. Does not touch the backward tape, so a shared
    /// model can serve concurrent callers.
    pub fn predict(&self, batch: &QueryBatch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let slope = self.config.leaky_slope;
        let mut latent = self.te.eval(&batch.topo, slope)?;
        latent.add_assign(&self.hepe.eval(&batch.hetero, slope)?)?;
        latent.add_assign(&self.hope.eval(&batch.homo, slope)?)?;
        kernel::affine_apply(&self.decoder.weight, &self.decoder.bias, &latent)
    }

    /// Forward pass honouring the current mode. In train mode dropout is
    /// active and layer caches are kept for [`Model::backward`].
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &QueryBatch, rng: &mut R) -> Result<Matrix> {
        if self.mode == Mode::Eval {
            self.tape = None;
            return self.predict(batch);
        }
        self.check_batch(batch)?;
        let slope = self.config.leaky_slope;
        let rate = self.config.dropout_rate;
        let (mut latent, te) = self.te.train(&batch.topo, slope, rate, rng)?;
        let (l_hepe, hepe) = self.hepe.train(&batch.hetero, slope, rate, rng)?;
        let (l_hope, hope) = self.hope.train(&batch.homo, slope, rate, rng)?;
        latent.add_assign(&l_hepe)?;
        latent.add_assign(&l_hope)?;
        let (pred, decoder) =
            kernel::affine_forward(&self.decoder.weight, &self.decoder.bias, &latent)?;
        self.tape = Some(Tape {
            te,
            hepe,
            hope,
            decoder,
        });
        Ok(pred)
    }

    /// Gradients of a scalar loss given `d_pred = dLoss/dPred`. Consumes the
    /// tape left by the last train-mode forward.
    pub fn backward(&mut self, d_pred: &Matrix) -> Result<Gradients> {
        let tape = self.tape.take().ok_or_else(|| {
            Error::State("backward called without a matching train-mode forward".into())
        })?;
        let g = kernel::affine_backward(d_pred, &self.decoder.weight, tape.decoder)?;
        let decoder = Dense {
            weight: g.dw,
            bias: g.db,
        };
        // summation fans the same upstream gradient out to every embedder
        let d_latent = g.dx;
        Ok(Gradients {
            te: self.te.backward(&d_latent, tape.te)?,
            hepe: self.hepe.backward(&d_latent, tape.hepe)?,
            hope: self.hope.backward(&d_latent, tape.hope)?,
            decoder,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.te
            .layers
            .iter()
            .chain(&self.hepe.layers)
            .chain(&self.hope.layers)
            .chain(std::iter::once(&self.decoder))
    }

    pub fn count_params(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Multiply-accumulates per query row: sum of `in * out` over affine layers.
    pub fn count_macs(&self) -> usize {
        self.layers().map(Dense::mac_count).sum()
    }

    /// Parameter arrays in canonical order: TE, HePE, HoPE, decoder; each
    /// layer contributes its weight then its bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.push(layer.weight.data());
            out.push(&layer.bias[..]);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self
            .te
            .layers
            .iter_mut()
            .chain(&mut self.hepe.layers)
            .chain(&mut self.hope.layers)
            .chain(std::iter::once(&mut self.decoder))
        {
            out.push(layer.weight.data_mut());
            out.push(&mut layer.bias[..]);
        }
        out
    }

    /// Names matching [`Model::param_slices`], e.g. `te.0.weight`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (stack, emb) in [("te", &self.te), ("hepe", &self.hepe), ("hope", &self.hope)] {
            for i in 0..emb.layers.len() {
                names.push(format!("{stack}.{i}.weight"));
                names.push(format!("{stack}.{i}.bias"));
            }
        }
        names.push("decoder.weight".into());
        names.push("decoder.bias".into());
        names
    }
}
