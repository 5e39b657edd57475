use std::fs;
use std::path::{Path, PathBuf};

use super::{BackboneConfig, BoundParams, ConditioningMode, Forecast, Interpolate, Metadata, Mlp};
use crate::error::{invalid, Error, Result};
use crate::rng::DyRng;
use crate::schedule::{make_schedule, Schedule};
use crate::tensor::{read_checkpoint, write_checkpoint, Activation, DropoutSpec, Graph, Var};
use crate::Tensor;

pub(crate) fn flat_row(x: &Tensor, dim: usize, op: &'static str) -> Result<Tensor> {
    if x.len() != dim {
        return Err(Error::Shape { op, detail: format!("snapshot {:?} has {} values, expected {dim}", x.shape(), x.len()) });
    }
    Tensor::new(vec![1, dim], x.data().to_vec())
}

pub(crate) fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_shape(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|e| invalid(format!("bad shape {text:?}: {e}"))))
        .collect()
}

pub(crate) fn backbone_meta(meta: &mut Metadata, net: &Mlp) {
    let c = &net.config;
    let act = match c.activation {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
        Activation::Silu => "silu",
    };
    meta.set("width", c.width).set("depth", c.depth).set("time_dim", c.time_dim).set("activation", act);
}

fn backbone_from_meta(meta: &Metadata) -> Result<BackboneConfig> {
    let activation = match meta.get("activation")? {
        "relu" => Activation::Relu,
        "gelu" => Activation::Gelu,
        "silu" => Activation::Silu,
        other => return Err(invalid(format!("unknown activation {other:?}"))),
    };
    Ok(BackboneConfig {
        width: meta.parse("width")?,
        depth: meta.parse("depth")?,
        time_dim: meta.parse("time_dim")?,
        activation,
    })
}

/// Paths `{stem}.dyfp` and `{stem}.meta`.
pub(crate) fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("dyfp"), stem.with_extension("meta"))
}

pub(crate) fn save_net(stem: &Path, net: &Mlp, meta: &Metadata) -> Result<()> {
    let (ckpt, side) = checkpoint_paths(stem);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &net.params.named_values())?;
    fs::write(ckpt, buf)?;
    fs::write(side, meta.to_text())?;
    Ok(())
}

pub(crate) fn load_net(stem: &Path, kind: &str, in_dim: impl Fn(&Metadata) -> Result<usize>) -> Result<(Mlp, Metadata)> {
    let (ckpt, side) = checkpoint_paths(stem);
    if !ckpt.exists() {
        return Err(Error::MissingInput(ckpt));
    }
    let meta = Metadata::from_text(&fs::read_to_string(&side).map_err(|_| Error::MissingInput(side.clone()))?)?;
    if meta.get("kind")? != kind {
        return Err(invalid(format!("{} holds a {} model, expected {kind}", side.display(), meta.get("kind")?)));
    }
    let shape = parse_shape(meta.get("snapshot_shape")?)?;
    let dim: usize = shape.iter().product();
    let cfg = backbone_from_meta(&meta)?;
    let mut net = Mlp::new(in_dim(&meta)?, dim, cfg, &mut crate::rng::substream(0, "load"))?;
    net.params.load_values(&read_checkpoint(fs::File::open(&ckpt)?)?)?;
    Ok((net, meta))
}

/// `I(x_t, x_{t+h}, i)`: the two snapshots are concatenated along features
/// and the raw time `i` drives the time embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatorModel {
    pub net: Mlp,
    pub dropout: DropoutSpec,
    horizon: usize,
    snapshot_shape: Vec<usize>,
    frozen: bool,
}

impl InterpolatorModel {
    pub fn new(
        snapshot_shape: &[usize],
        horizon: usize,
        config: BackboneConfig,
        dropout_rate: f64,
        rng: &mut DyRng,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(invalid("interpolation needs a horizon of at least 2"));
        }
        let dim: usize = snapshot_shape.iter().product();
        Ok(Self {
            net: Mlp::new(2 * dim, dim, config, rng)?,
            dropout: DropoutSpec::new(dropout_rate, false)?,
            horizon,
            snapshot_shape: snapshot_shape.to_vec(),
            frozen: false,
        })
    }

    pub fn snapshot_shape(&self) -> &[usize] {
        &self.snapshot_shape
    }

    pub fn snapshot_len(&self) -> usize {
        self.net.out_dim
    }

    /// Freezes the weights for forecaster training and switches Monte-Carlo
    /// dropout on for inference.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.dropout.active_at_inference = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copy with inference dropout switched on or off.
    pub fn with_inference_dropout(&self, active: bool) -> Self {
        let mut m = self.clone();
        m.dropout.active_at_inference = active;
        m
    }

    /// `i in (0, 1)` lies between the initial conditions and the first data
    /// timestep, where no training targets exist.
    pub fn is_outside_training_regime(i: f64) -> bool {
        i > 0.0 && i < 1.0
    }

    /// Batched pass on a graph; rows of `x_t`/`x_h` are flattened snapshots.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundParams,
        x_t: Var,
        x_h: Var,
        times: &[f64],
        dropout: Option<(f64, &mut DyRng)>,
    ) -> Result<Var> {
        let input = g.concat(x_t, x_h)?;
        self.net.forward(g, bound, input, times, dropout)
    }

    /// One interpolation. Dropout is applied only when a stream is supplied
    /// and inference dropout is active.
    pub fn interpolate(&self, x_t: &Tensor, x_h: &Tensor, i: f64, rng: Option<&mut DyRng>) -> Result<Tensor> {
        if !(i > 0.0 && i < self.horizon as f64) {
            return Err(invalid(format!("interpolation time {i} outside (0, {})", self.horizon)));
        }
        let dim = self.snapshot_len();
        let (a, b) = (flat_row(x_t, dim, "interpolate")?, flat_row(x_h, dim, "interpolate")?);
        let rate = self.dropout.effective_rate(false);
        let dropout = rng.map(|r| (rate, r));
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, false)?;
        let (av, bv) = (g.constant(a)?, g.constant(b)?);
        let out = self.forward_graph(&mut g, &bound, av, bv, &[i], dropout)?;
        Tensor::new(self.snapshot_shape.clone(), g.value(out).data().to_vec())
    }

    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("kind", "interpolator")
            .set("horizon", self.horizon)
            .set("snapshot_shape", shape_text(&self.snapshot_shape))
            .set("dropout_rate", self.dropout.rate)
            .set("dropout_at_inference", self.dropout.active_at_inference)
            .set("frozen", self.frozen)
            .set("time_input", "raw");
        backbone_meta(&mut m, &self.net);
        m
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_net(stem, &self.net, &self.metadata())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (net, meta) = load_net(stem, "interpolator", |m| {
            Ok(2 * parse_shape(m.get("snapshot_shape")?)?.iter().product::<usize>())
        })?;
        Ok(Self {
            net,
            dropout: DropoutSpec::new(meta.parse("dropout_rate")?, meta.parse("dropout_at_inference")?)?,
            horizon: meta.parse("horizon")?,
            snapshot_shape: parse_shape(meta.get("snapshot_shape")?)?,
            frozen: meta.parse("frozen")?,
        })
    }
}

impl Interpolate for InterpolatorModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn interpolate_at(&self, x_t: &Tensor, x_h: &Tensor, i: f64, rng: &mut DyRng) -> Result<Tensor> {
        if i == 0.0 {
            return Ok(x_t.clone());
        }
        self.interpolate(x_t, x_h, i, Some(rng))
    }

    fn is_stochastic(&self) -> bool {
        self.dropout.effective_rate(false) > 0.0
    }
}

/// `F(x, i_n, c)`: deterministic estimate of `x_{t+h}`. With clean or noised
/// conditioning the conditioning snapshot is concatenated to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterModel {
    pub net: Mlp,
    pub conditioning: ConditioningMode,
    /// Dropout used during training only.
    pub train_dropout: f64,
    horizon: usize,
    snapshot_shape: Vec<usize>,
    /// Schedule used in training; set by the trainer and saved with the model.
    schedule: Option<Schedule>,
}

impl ForecasterModel {
    pub fn new(
        snapshot_shape: &[usize],
        horizon: usize,
        config: BackboneConfig,
        conditioning: ConditioningMode,
        train_dropout: f64,
        rng: &mut DyRng,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(invalid("horizon must be at least 1"));
        }
        DropoutSpec::new(train_dropout, false)?;
        let dim: usize = snapshot_shape.iter().product();
        let in_dim = if conditioning == ConditioningMode::None { dim } else { 2 * dim };
        Ok(Self {
            net: Mlp::new(in_dim, dim, config, rng)?,
            conditioning,
            train_dropout,
            horizon,
            snapshot_shape: snapshot_shape.to_vec(),
            schedule: None,
        })
    }

    pub fn snapshot_shape(&self) -> &[usize] {
        &self.snapshot_shape
    }

    pub fn snapshot_len(&self) -> usize {
        self.net.out_dim
    }

    /// The training schedule, or the plain `0..h` schedule for an untrained model.
    pub fn schedule(&self) -> Result<Schedule> {
        match &self.schedule {
            Some(s) => Ok(s.clone()),
            None => make_schedule(self.horizon, 0),
        }
    }

    pub fn set_schedule(&mut self, schedule: Schedule) -> Result<()> {
        if schedule.horizon() != self.horizon {
            return Err(invalid("schedule horizon differs from the model horizon"));
        }
        self.schedule = Some(schedule);
        Ok(())
    }

    /// Batched pass on a graph. `cond` must be present exactly when the
    /// conditioning mode is not `None`.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundParams,
        x: Var,
        cond: Option<Var>,
        times: &[f64],
        dropout: Option<(f64, &mut DyRng)>,
    ) -> Result<Var> {
        let input = match (self.conditioning, cond) {
            (ConditioningMode::None, None) => x,
            (ConditioningMode::None, Some(_)) => return Err(invalid("forecaster without conditioning got a conditioning input")),
            (_, Some(c)) => g.concat(x, c)?,
            (_, None) => return Err(invalid("forecaster expects a conditioning input")),
        };
        self.net.forward(g, bound, input, times, dropout)
    }

    pub fn forecast(&self, x: &Tensor, i_n: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        if !(i_n >= 0.0 && i_n < self.horizon as f64) {
            return Err(invalid(format!("forecaster time {i_n} outside [0, {})", self.horizon)));
        }
        let dim = self.snapshot_len();
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, false)?;
        let xv = g.constant(flat_row(x, dim, "forecast")?)?;
        let cv = match cond {
            Some(c) => Some(g.constant(flat_row(c, dim, "forecast")?)?),
            None => None,
        };
        let out = self.forward_graph(&mut g, &bound, xv, cv, &[i_n], None)?;
        Tensor::new(self.snapshot_shape.clone(), g.value(out).data().to_vec())
    }

    pub fn metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("kind", "forecaster")
            .set("horizon", self.horizon)
            .set("snapshot_shape", shape_text(&self.snapshot_shape))
            .set("conditioning", self.conditioning)
            .set("train_dropout", self.train_dropout)
            .set("time_input", "raw");
        if let Some(s) = &self.schedule {
            let steps: Vec<String> = s.steps().iter().map(|v| format!("{v:?}")).collect();
            m.set("schedule", steps.join(",")).set("aux_steps", s.aux_count());
        }
        backbone_meta(&mut m, &self.net);
        m
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_net(stem, &self.net, &self.metadata())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (net, meta) = load_net(stem, "forecaster", |m| {
            let dim = parse_shape(m.get("snapshot_shape")?)?.iter().product::<usize>();
            let mode: ConditioningMode = m.parse("conditioning")?;
            Ok(if mode == ConditioningMode::None { dim } else { 2 * dim })
        })?;
        Ok(Self {
            net,
            conditioning: meta.parse("conditioning")?,
            train_dropout: meta.parse("train_dropout")?,
            horizon: meta.parse("horizon")?,
            snapshot_shape: parse_shape(meta.get("snapshot_shape")?)?,
            schedule: match meta.get("schedule") {
                Ok(text) => {
                    let steps = text
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| invalid(format!("bad schedule entry {v:?}"))))
                        .collect::<Result<Vec<f64>>>()?;
                    Some(Schedule::from_steps(meta.parse("horizon")?, steps, meta.parse("aux_steps")?)?)
                }
                Err(_) => None,
            },
        })
    }
}

impl Forecast for ForecasterModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn conditioning(&self) -> ConditioningMode {
        self.conditioning
    }

    fn forecast_at(&self, x: &Tensor, s: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        self.forecast(x, s, cond)
    }
}
