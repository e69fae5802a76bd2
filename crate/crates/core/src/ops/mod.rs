//! Registered dense kernels and their vector-Jacobian products.
//!
//! Every kernel is a pure function of its inputs. [`forward`] evaluates an
//! [`Op`]; [`vjp`] returns `∂⟨cotangent, op(inputs)⟩/∂input` for each input.

mod conv;
mod elementwise;
mod linalg;
mod sample;
mod shape;
mod special;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv2d_out_extent, Conv2dSpec};
pub use elementwise::sigmoid;
pub use special::{FocalSpec, ORIENTATION_BINS};

/// One of the four sub-bands of a single-level 2-D Haar decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Ll, Band::Lh, Band::Hl, Band::Hh];

    /// Signs applied to the block entries `[a, b, c, d]` of `[[a, b], [c, d]]`.
    pub(crate) fn signs(self) -> [f64; 4] {
        match self {
            Band::Ll => [1.0, 1.0, 1.0, 1.0],
            Band::Lh => [1.0, 1.0, -1.0, -1.0],
            Band::Hl => [1.0, -1.0, 1.0, -1.0],
            Band::Hh => [1.0, -1.0, -1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Ll => "ll",
            Band::Lh => "lh",
            Band::Hl => "hl",
            Band::Hh => "hh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    // Broadcasting binary elementwise.
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    // Unary elementwise.
    Scale(f64),
    AddScalar(f64),
    Abs,
    Relu,
    Sigmoid,
    Sqrt,
    Ln,
    /// Inverse sigmoid clamped to `[-bound, bound]`.
    Logit {
        bound: f64,
    },
    // Normalization and products.
    Softmax {
        axis: usize,
    },
    LayerNorm {
        eps: f64,
    },
    Matmul,
    // Layout.
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
    },
    // Reductions.
    SumAll,
    SumAxis {
        axis: usize,
    },
    /// Global average pooling `[N,C,H,W] -> [N,C,1,1]`.
    MeanPool,
    // Spatial.
    Conv2d(Conv2dSpec),
    PadReplicate {
        pad: usize,
    },
    UpsampleNearest2x,
    HaarBand(Band),
    BilinearSample,
    // Fused special-purpose kernels.
    OrientationEnergy {
        eps: f64,
    },
    SigmoidFocal(FocalSpec),
}

/// Registered kernel names, as accepted by [`Op::by_name`].
pub const REGISTERED: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "minimum",
    "scale",
    "add_scalar",
    "abs",
    "relu",
    "sigmoid",
    "sqrt",
    "ln",
    "logit",
    "softmax",
    "layer_norm",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "slice",
    "index_select",
    "sum",
    "sum_axis",
    "mean_pool",
    "conv2d",
    "pad_replicate",
    "upsample",
    "haar_band",
    "bilinear_sample",
    "orientation_energy",
    "sigmoid_focal",
];

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Maximum => "maximum",
            Op::Minimum => "minimum",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Ln => "ln",
            Op::Logit { .. } => "logit",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Matmul => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexSelect { .. } => "index_select",
            Op::SumAll => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanPool => "mean_pool",
            Op::Conv2d(_) => "conv2d",
            Op::PadReplicate { .. } => "pad_replicate",
            Op::UpsampleNearest2x => "upsample",
            Op::HaarBand(_) => "haar_band",
            Op::BilinearSample => "bilinear_sample",
            Op::OrientationEnergy { .. } => "orientation_energy",
            Op::SigmoidFocal(_) => "sigmoid_focal",
        }
    }

    /// Looks up a registered kernel by name with default attributes.
    ///
    /// Kernels whose attributes have no sensible default (reshape, slice,
    /// focal targets, ...) are still recognised but must be built directly.
    pub fn by_name(name: &str) -> Result<Op> {
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "maximum" => Op::Maximum,
            "minimum" => Op::Minimum,
            "scale" => Op::Scale(1.0),
            "add_scalar" => Op::AddScalar(0.0),
            "abs" => Op::Abs,
            "relu" => Op::Relu,
            "sigmoid" => Op::Sigmoid,
            "sqrt" => Op::Sqrt,
            "ln" => Op::Ln,
            "logit" => Op::Logit { bound: 8.0 },
            "softmax" => Op::Softmax { axis: 0 },
            "layer_norm" => Op::LayerNorm { eps: 1e-5 },
            "matmul" => Op::Matmul,
            "sum" => Op::SumAll,
            "sum_axis" => Op::SumAxis { axis: 0 },
            "mean_pool" => Op::MeanPool,
            "conv2d" => Op::Conv2d(Conv2dSpec::default()),
            "pad_replicate" => Op::PadReplicate { pad: 1 },
            "upsample" => Op::UpsampleNearest2x,
            "haar_band" => Op::HaarBand(Band::Ll),
            "bilinear_sample" => Op::BilinearSample,
            "orientation_energy" => Op::OrientationEnergy { eps: 1e-6 },
            "concat" => Op::Concat { axis: 0 },
            other if REGISTERED.contains(&other) => {
                return Err(Error::Argument(format!(
                    "op `{other}` needs explicit attributes"
                )))
            }
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum | Op::Minimum => Some(2),
            Op::Matmul | Op::Conv2d(_) | Op::BilinearSample | Op::OrientationEnergy { .. } => {
                Some(2)
            }
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn check_arity(op: &Op, inputs: &[&Tensor]) -> Result<()> {
    match op.arity() {
        Some(n) if n != inputs.len() => Err(Error::Argument(format!(
            "{} takes {n} inputs, got {}",
            op.name(),
            inputs.len()
        ))),
        None if inputs.is_empty() => Err(Error::Argument("concat of zero inputs".into())),
        _ => Ok(()),
    }
}

/// Evaluates `op` on `inputs`.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    check_arity(op, inputs)?;
    let x = inputs[0];
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum | Op::Minimum => {
            elementwise::binary_forward(op, x, inputs[1])
        }
        Op::Scale(_)
        | Op::AddScalar(_)
        | Op::Abs
        | Op::Relu
        | Op::Sigmoid
        | Op::Sqrt
        | Op::Ln
        | Op::Logit { .. } => Ok(elementwise::unary_forward(op, x)),
        Op::Softmax { axis } => linalg::softmax(x, *axis),
        Op::LayerNorm { eps } => Ok(linalg::layer_norm(x, *eps)),
        Op::Matmul => linalg::matmul(x, inputs[1]),
        Op::Reshape(s) => x.reshape(s),
        Op::Permute(p) => shape::permute(x, p),
        Op::Concat { axis } => shape::concat(inputs, *axis),
        Op::Slice { axis, start, end } => shape::slice(x, *axis, *start, *end),
        Op::IndexSelect { axis, indices } => shape::index_select(x, *axis, indices),
        Op::SumAll => Ok(Tensor::scalar(x.sum())),
        Op::SumAxis { axis } => shape::sum_axis(x, *axis),
        Op::MeanPool => conv::mean_pool(x),
        Op::Conv2d(spec) => conv::conv2d(x, inputs[1], spec),
        Op::PadReplicate { pad } => conv::pad_replicate(x, *pad),
        Op::UpsampleNearest2x => conv::upsample2x(x),
        Op::HaarBand(band) => conv::haar_band(x, *band),
        Op::BilinearSample => sample::bilinear_sample(x, inputs[1]),
        Op::OrientationEnergy { eps } => special::orientation_energy(x, inputs[1], *eps),
        Op::SigmoidFocal(spec) => special::sigmoid_focal(x, spec),
    }
}

/// Vector-Jacobian product of `op` at `inputs`, given the forward `output`.
pub fn vjp_with_output(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    cotangent: &Tensor,
) -> Result<Vec<Tensor>> {
    check_arity(op, inputs)?;
    if cotangent.shape() != output.shape() {
        return Err(Error::dim(
            "vjp",
            "cotangent",
            format!(
                "cotangent {:?} does not match output {:?}",
                cotangent.shape(),
                output.shape()
            ),
        ));
    }
    let x = inputs[0];
    let g = cotangent;
    Ok(match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum | Op::Minimum => {
            let (a, b) = elementwise::binary_vjp(op, x, inputs[1], g);
            vec![a, b]
        }
        Op::Scale(_)
        | Op::AddScalar(_)
        | Op::Abs
        | Op::Relu
        | Op::Sigmoid
        | Op::Sqrt
        | Op::Ln
        | Op::Logit { .. } => vec![elementwise::unary_vjp(op, x, output, g)],
        Op::Softmax { axis } => vec![linalg::softmax_vjp(output, g, *axis)],
        Op::LayerNorm { eps } => vec![linalg::layer_norm_vjp(x, output, g, *eps)],
        Op::Matmul => {
            let (a, b) = linalg::matmul_vjp(x, inputs[1], g)?;
            vec![a, b]
        }
        Op::Reshape(_) => vec![g.reshape(x.shape())?],
        Op::Permute(p) => vec![shape::permute(g, &shape::inverse_perm(p))?],
        Op::Concat { axis } => shape::concat_vjp(inputs, g, *axis)?,
        Op::Slice { axis, start, .. } => vec![shape::slice_vjp(x, g, *axis, *start)],
        Op::IndexSelect { axis, indices } => vec![shape::index_select_vjp(x, g, *axis, indices)],
        Op::SumAll => vec![Tensor::full(x.shape(), g.item())],
        Op::SumAxis { axis } => vec![shape::sum_axis_vjp(x, g, *axis)],
        Op::MeanPool => vec![conv::mean_pool_vjp(x, g)],
        Op::Conv2d(spec) => {
            let (dx, dw) = conv::conv2d_vjp(x, inputs[1], g, spec);
            vec![dx, dw]
        }
        Op::PadReplicate { pad } => vec![conv::pad_replicate_vjp(x, g, *pad)],
        Op::UpsampleNearest2x => vec![conv::upsample2x_vjp(x, g)],
        Op::HaarBand(band) => vec![conv::haar_band_vjp(x, g, *band)],
        Op::BilinearSample => {
            let (dx, dp) = sample::bilinear_sample_vjp(x, inputs[1], g);
            vec![dx, dp]
        }
        Op::OrientationEnergy { eps } => {
            let (a, b) = special::orientation_energy_vjp(x, inputs[1], g, *eps);
            vec![a, b]
        }
        Op::SigmoidFocal(spec) => vec![special::sigmoid_focal_vjp(x, g, spec)],
    })
}

/// Vector-Jacobian product of `op` at `inputs`; recomputes the forward value.
pub fn vjp(op: &Op, inputs: &[&Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
    let output = forward(op, inputs)?;
    vjp_with_output(op, inputs, &output, cotangent)
}

/// Convolution with symmetric zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    groups: usize,
    pad: usize,
) -> Result<Tensor> {
    conv::conv2d(x, w, &Conv2dSpec::new(stride, dilation, groups, pad))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    linalg::matmul(a, b)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    linalg::softmax(x, axis)
}

/// Samples `x: [N,C,H,W]` at normalized `(x, y)` points `[N,P,2]`, giving `[N,P,C]`.
pub fn bilinear_sample(x: &Tensor, points: &Tensor) -> Result<Tensor> {
    sample::bilinear_sample(x, points)
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    conv::upsample2x(x)
}

pub fn haar_band(x: &Tensor, band: Band) -> Result<Tensor> {
    conv::haar_band(x, band)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    elementwise::broadcast_shape(a, b)
}
