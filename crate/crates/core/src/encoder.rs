//! Residual convolutional trunk producing 1/8-resolution maps.

use crate::config::{EncoderConfig, ModelConfig, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::params::{ParamSpec, Params};
use matchflow_tensor::{Real, Tape, Var};

/// Checks that an image side pair is usable by the whole pipeline.
pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Resolution(format!(
            "image is {h}x{w}; both sides must be positive multiples of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Init gain of the matching-feature head; keeps initial correlations in a
/// range where the dual softmax at τ = 0.1 is not saturated.
pub const FEATURE_HEAD_GAIN: f64 = 0.025;
/// Init gain of the context head; keeps the initial hidden state off the
/// saturated part of `tanh`.
pub const CONTEXT_HEAD_GAIN: f64 = 0.25;

fn conv_spec(out: &mut Vec<ParamSpec>, name: String, cout: usize, cin: usize, k: usize) {
    conv_spec_gain(out, name, cout, cin, k, 1.0);
}

fn conv_spec_gain(out: &mut Vec<ParamSpec>, name: String, cout: usize, cin: usize, k: usize, gain: f64) {
    out.push(ParamSpec::conv(format!("{name}.w"), cout, cin, k, gain));
    out.push(ParamSpec::zeros(format!("{name}.b"), &[cout]));
}

/// Parameters of one trunk under `prefix` emitting `out_channels`.
pub fn param_specs(prefix: &str, cfg: &EncoderConfig, out_channels: usize, head_gain: f64) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    conv_spec(&mut s, format!("{prefix}.stem"), cfg.stem, 3, 3);
    let mut cin = cfg.stem;
    for (si, &w) in cfg.stages.iter().enumerate() {
        for b in 0..2 {
            let p = format!("{prefix}.s{si}.b{b}");
            conv_spec(&mut s, format!("{p}.c1"), w, if b == 0 { cin } else { w }, 3);
            conv_spec(&mut s, format!("{p}.c2"), w, w, 3);
            if b == 0 {
                conv_spec(&mut s, format!("{p}.down"), w, cin, 1);
            }
        }
        cin = w;
    }
    conv_spec_gain(&mut s, format!("{prefix}.head"), out_channels, cin, 1, head_gain);
    s
}

fn conv<T: Real>(g: &mut Tape<T>, p: &Params, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, p[&format!("{name}.w")], stride, pad)?;
    Ok(g.add_bias(y, p[&format!("{name}.b")], 0)?)
}

fn block<T: Real>(g: &mut Tape<T>, p: &Params, name: &str, x: Var, first: bool) -> Result<Var> {
    let stride = if first { 2 } else { 1 };
    let y = conv(g, p, &format!("{name}.c1"), x, stride, 1)?;
    let y = g.relu(y)?;
    let y = conv(g, p, &format!("{name}.c2"), y, 1, 1)?;
    let skip = if first { conv(g, p, &format!("{name}.down"), x, 2, 0)? } else { x };
    let y = g.add(y, skip)?;
    Ok(g.relu(y)?)
}

/// Runs the trunk named `prefix` on `image[3×H×W]` (values in [0,1]).
pub fn trunk<T: Real>(g: &mut Tape<T>, p: &Params, prefix: &str, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Contract(format!("expected a [3,H,W] image, got {shape:?}")));
    }
    check_resolution(shape[1], shape[2])?;
    let x = g.scale(image, T::lit(2.0))?;
    let x = g.add_scalar(x, T::lit(-1.0))?;
    let x = conv(g, p, &format!("{prefix}.stem"), x, 1, 1)?;
    let mut x = g.relu(x)?;
    for si in 0..3 {
        for b in 0..2 {
            x = block(g, p, &format!("{prefix}.s{si}.b{b}"), x, b == 0)?;
        }
    }
    conv(g, p, &format!("{prefix}.head"), x, 1, 0)
}

/// Matching features `[C×H/8×W/8]`.
pub fn encode_features<T: Real>(g: &mut Tape<T>, p: &Params, image: Var) -> Result<Var> {
    trunk(g, p, "enc", image)
}

/// Initial GRU state and context features of the first frame.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    /// `tanh` of the first half of the context trunk output, in (−1, 1).
    pub hidden: Var,
    /// `relu` of the second half.
    pub context: Var,
}

pub fn encode_context<T: Real>(g: &mut Tape<T>, p: &Params, cfg: &ModelConfig, image: Var) -> Result<ContextVars> {
    let out = trunk(g, p, "ctx", image)?;
    let h = g.slice(out, 0, 0, cfg.flow.hidden)?;
    let c = g.slice(out, 0, cfg.flow.hidden, cfg.flow.context)?;
    Ok(ContextVars { hidden: g.tanh(h)?, context: g.relu(c)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelWeights;
    use matchflow_tensor::Tensor;

    fn image(h: usize, w: usize, seed: u32) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 251) as f32 / 250.0)
    }

    #[test]
    fn output_is_one_eighth() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let mut g: Tape<f32> = Tape::new();
        let p = w.bind(&mut g, |_| false);
        let x = g.constant(image(64, 64, 3));
        let f = encode_features(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(f), &[cfg.channels(), 8, 8]);
        let x = g.constant(image(96, 128, 3));
        let c = encode_context(&mut g, &p, &cfg, x).unwrap();
        assert_eq!(g.shape(c.hidden), &[cfg.flow.hidden, 12, 16]);
        assert_eq!(g.shape(c.context), &[cfg.flow.context, 12, 16]);
        assert!(g.value(c.hidden).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = ModelConfig::tiny();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let mut g: Tape<f32> = Tape::new();
        let p = w.bind(&mut g, |_| false);
        let x = g.constant(image(48, 64, 0));
        let e = encode_features(&mut g, &p, x).unwrap_err();
        assert!(matches!(e, Error::Resolution(ref m) if m.contains("32")));
    }

    #[test]
    fn zero_image_is_finite() {
        let cfg = ModelConfig::desk();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let mut g: Tape<f32> = Tape::new();
        let p = w.bind(&mut g, |_| false);
        let x = g.constant(Tensor::zeros(&[3, 32, 64]));
        let f = encode_features(&mut g, &p, x).unwrap();
        assert!(g.value(f).is_finite());
    }
}
