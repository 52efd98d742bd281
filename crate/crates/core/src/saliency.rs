//! Input-gradient saliency maps: guided backpropagation and the plain
//! (vanilla) gradient, seeded at a pre-softmax logit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, ReluProbe, ReluRule};
use crate::ops::Mode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub target: usize,
    pub patient_id: Option<String>,
    pub slice_index: Option<usize>,
    /// Signed input gradient, row-major.
    pub raw: Vec<f64>,
    /// Min-max rescaled `raw`; all zeros when `normalized` is false.
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// False when the map was constant (typically all zero) and left unscaled.
    pub normalized: bool,
}

impl SaliencyMap {
    fn from_raw(raw: Vec<f64>, width: usize, height: usize, target: usize) -> Self {
        let (min, max) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = max - min;
        let normalized = range > 0.0;
        let values = if normalized {
            raw.iter().map(|&v| (v - min) / range).collect()
        } else {
            vec![0.0; raw.len()]
        };
        SaliencyMap {
            width,
            height,
            target,
            patient_id: None,
            slice_index: None,
            raw,
            values,
            min,
            max,
            normalized,
        }
    }

    /// `raw / max|raw|`, keeping signs; zero maps stay zero.
    pub fn signed_normalized(&self) -> Vec<f64> {
        let peak = self.raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return self.raw.clone();
        }
        self.raw.iter().map(|v| v / peak).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.raw.iter().all(|&v| v == 0.0)
    }
}

pub struct SaliencyOptions<'a, T: Real> {
    pub rule: ReluRule,
    /// Class whose logit is seeded; `None` picks the predicted class.
    pub target: Option<usize>,
    /// Magnitude of the seed gradient placed on the target logit.
    pub seed_scale: f64,
    pub probe: Option<ReluProbe<'a, T>>,
}

impl<T: Real> Default for SaliencyOptions<'_, T> {
    fn default() -> Self {
        SaliencyOptions {
            rule: ReluRule::Guided,
            target: None,
            seed_scale: 1.0,
            probe: None,
        }
    }
}

/// Eval-mode forward on a `[1,C,H,W]` image, then backward from one logit.
/// Multi-channel inputs are summed over channels.
pub fn gradient_map<T: Real>(
    graph: &LayerGraph<T>,
    image: &Tensor<T>,
    opts: SaliencyOptions<'_, T>,
) -> Result<SaliencyMap> {
    let (n, c, h, w) = image.dims4("saliency")?;
    if n != 1 {
        return Err(Error::Usage(format!(
            "saliency takes one image at a time, got a batch of {n}"
        )));
    }
    let trace = graph.forward_trace(image, Mode::Eval)?;
    let logits = trace.value(graph.logits());
    let k = logits.shape()[1];
    let target = match opts.target {
        Some(t) if t >= k => {
            return Err(Error::Usage(format!(
                "target class {t} is out of range for {k} classes"
            )));
        }
        Some(t) => t,
        None => {
            let row = trace.value(graph.output()).data();
            (0..k).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        }
    };
    let mut seed = Tensor::zeros(&[1, k]);
    seed.data_mut()[target] = T::from_f64(opts.seed_scale);
    let grad = graph.input_gradient(&trace, graph.logits(), seed, opts.rule, opts.probe)?;
    let plane = h * w;
    let mut raw = vec![0.0f64; plane];
    for ch in 0..c {
        for (r, g) in raw.iter_mut().zip(&grad.data()[ch * plane..(ch + 1) * plane]) {
            *r += g.as_f64();
        }
    }
    Ok(SaliencyMap::from_raw(raw, w, h, target))
}

pub fn guided_backprop<T: Real>(
    graph: &LayerGraph<T>,
    image: &Tensor<T>,
    target: Option<usize>,
) -> Result<SaliencyMap> {
    gradient_map(
        graph,
        image,
        SaliencyOptions {
            target,
            ..SaliencyOptions::default()
        },
    )
}

pub fn vanilla_gradient<T: Real>(
    graph: &LayerGraph<T>,
    image: &Tensor<T>,
    target: Option<usize>,
) -> Result<SaliencyMap> {
    gradient_map(
        graph,
        image,
        SaliencyOptions {
            rule: ReluRule::Standard,
            target,
            ..SaliencyOptions::default()
        },
    )
}

/// 8-bit quantization with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|&v| quantize(v)));
    out
}

pub fn write_map_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
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
            return Err(Error::Parse {
                offset: pos,
                message: "truncated PGM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0].1 != "P5" {
        return Err(Error::Parse {
            offset: 0,
            message: "expected \"P5\" magic".into(),
        });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Parse {
            offset: fields[i].0,
            message: format!("bad PGM header field {:?}", fields[i].1),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Parse {
            offset: fields[3].0,
            message: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("expected {} raster bytes", w * h),
        });
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
