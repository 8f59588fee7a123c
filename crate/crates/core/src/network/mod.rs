//! Feature extractor, shared linear classifier, and the parameter store that
//! also holds the modulation matrix.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Array2, Graph, ParamId, ParamSet, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout on, gradients wanted.
    Train,
    /// Dropout off.
    Eval,
    /// Dropout on for Monte Carlo sampling.
    McDropout,
}

impl ForwardMode {
    fn dropout_active(self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub dropout_p: f64,
    /// Adds the raw input to the output when `feature_dim == input_dim`,
    /// so feature coordinate k stays tied to input coordinate k.
    pub residual: bool,
}

impl ExtractorConfig {
    pub fn new(input_dim: usize) -> Self {
        ExtractorConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            dropout_p: 0.05,
            residual: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Parameter("extractor widths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Parameter(format!("dropout_p {}", self.dropout_p)));
        }
        Ok(())
    }

    fn uses_residual(&self) -> bool {
        self.residual && self.input_dim == self.feature_dim
    }
}

/// Weight `in x out` and bias `1 x out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight)?;
        let b = g.param(params, self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add_row_bias(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub hidden: Vec<Affine>,
    pub output: Affine,
}

impl Extractor {
    /// relu(affine) for each hidden layer, dropout after the last hidden
    /// activation, then the output affine map (plus the input when residual).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Var> {
        if g.value(x).cols() != self.config.input_dim {
            return Err(Error::dim(
                "extract",
                format!(
                    "input has {} columns, extractor expects {}",
                    g.value(x).cols(),
                    self.config.input_dim
                ),
            ));
        }
        let mut h = x;
        for layer in &self.hidden {
            let a = layer.forward(g, params, h)?;
            h = g.relu(a)?;
        }
        h = g.dropout(h, self.config.dropout_p, rng, mode.dropout_active())?;
        let out = self.output.forward(g, params, h)?;
        if self.config.uses_residual() {
            g.add(out, x)
        } else {
            Ok(out)
        }
    }
}

/// Linear head shared by every domain and every modulated row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classifier {
    pub affine: Affine,
    pub num_classes: usize,
}

impl Classifier {
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
        let expected = params.value(self.affine.weight).rows();
        if g.value(z).cols() != expected {
            return Err(Error::dim(
                "classify",
                format!("features have {} columns, classifier expects {expected}", g.value(z).cols()),
            ));
        }
        self.affine.forward(g, params, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub extractor: Extractor,
    pub classifier: Classifier,
    /// The `C x F` modulation matrix.
    pub modulator: ParamId,
}

impl Model {
    /// Fresh weights. Hidden layers use He-uniform initialization; the output
    /// layer starts small so a residual extractor begins close to identity.
    /// The modulation matrix starts at all ones.
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        let mut params = ParamSet::new();
        let mut hidden = Vec::new();
        let mut width = config.input_dim;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            let bound = (6.0 / width as f64).sqrt();
            hidden.push(affine(&mut params, &format!("extractor.hidden{i}"), width, h, bound, rng)?);
            width = h;
        }
        let out_bound = if config.uses_residual() {
            0.1 * (3.0 / width as f64).sqrt()
        } else {
            (3.0 / width as f64).sqrt()
        };
        let output = affine(&mut params, "extractor.output", width, config.feature_dim, out_bound, rng)?;
        let cls_bound = (6.0 / (config.feature_dim + num_classes) as f64).sqrt();
        let cls = affine(&mut params, "classifier", config.feature_dim, num_classes, cls_bound, rng)?;
        let modulator = params.add(
            "modulator",
            Array2::ones(num_classes, config.feature_dim),
            true,
        )?;
        Ok(Model {
            params,
            extractor: Extractor {
                config,
                hidden,
                output,
            },
            classifier: Classifier {
                affine: cls,
                num_classes,
            },
            modulator,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.config.feature_dim
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.config.input_dim
    }

    pub fn modulation(&self) -> &Array2 {
        self.params.value(self.modulator)
    }

    pub fn set_modulation(&mut self, m: Array2) -> Result<()> {
        if m.shape() != (self.num_classes(), self.feature_dim()) {
            return Err(Error::dim(
                "set_modulation",
                format!("{:?} for {}x{}", m.shape(), self.num_classes(), self.feature_dim()),
            ));
        }
        self.params.get_mut(self.modulator).value = m;
        Ok(())
    }

    pub fn extract<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Var> {
        self.extractor.forward(g, &self.params, x, mode, rng)
    }

    pub fn classify(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.classifier.forward(g, &self.params, z)
    }

    /// Features of a plain batch without recording gradients of interest.
    pub fn features<R: Rng + ?Sized>(&self, x: &Array2, mode: ForwardMode, rng: &mut R) -> Result<Array2> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let z = self.extract(&mut g, xv, mode, rng)?;
        Ok(g.value(z).clone())
    }
}

fn affine<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bound: f64,
    rng: &mut R,
) -> Result<Affine> {
    let dist = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::Parameter(format!("init bound {bound}: {e}")))?;
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    let weight = params.add(format!("{name}.weight"), Array2::from_vec(fan_in, fan_out, w)?, true)?;
    let bias = params.add(format!("{name}.bias"), Array2::zeros(1, fan_out), true)?;
    Ok(Affine { weight, bias })
}
