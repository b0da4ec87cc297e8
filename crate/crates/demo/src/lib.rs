use std::f64::consts::PI;

use nbc_core::losses::{class_means, negative_block_term, nbc_negative_term, LossConfig, Similarity};
use nbc_core::retrieval::{evaluate, min_class_mean_angle, Measure, MetricReport};
use nbc_core::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn loss_config(tau: f64) -> LossConfig {
    LossConfig {
        tau,
        alpha: 0.0,
        similarity: Similarity::Cosine,
        ..LossConfig::singletask()
    }
}

/// `k` unit vectors in the plane, consecutive ones `spacing` radians apart.
fn fan(k: usize, spacing: f64) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let a = i as f64 * spacing;
            vec![a.cos(), a.sin()]
        })
        .collect();
    Tensor::from_rows(&rows).expect("non-empty fan")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Landscape {
    pub spacing: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Negative block term for `classes` fanned class means as the spacing grows
/// from 0 to `2π / classes`.
pub fn landscape(tau: f64, classes: usize, points: usize) -> Result<Landscape, String> {
    if classes < 2 || points < 2 {
        return Err("need at least 2 classes and 2 points".into());
    }
    let cfg = loss_config(tau);
    let top = 2.0 * PI / classes as f64;
    let labels: Vec<usize> = (0..classes).collect();
    let mut out = Landscape {
        spacing: Vec::with_capacity(points),
        loss: Vec::with_capacity(points),
    };
    for i in 0..points {
        let s = top * i as f64 / (points - 1) as f64;
        let stats = class_means(&fan(classes, s), &labels).map_err(|e| e.to_string())?;
        out.spacing.push(s);
        out.loss.push(nbc_negative_term(&stats, &cfg).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalDemo {
    pub cosine: MetricReport,
    pub euclidean: MetricReport,
    /// First two coordinates of every embedding, for plotting.
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

/// Gaussian clusters around random author centres, scored with both measures.
pub fn retrieval(authors: usize, per_author: usize, dim: usize, noise: f64, seed: u64) -> Result<RetrievalDemo, String> {
    if authors < 2 || per_author < 2 || dim < 2 {
        return Err("need at least 2 authors, 2 samples per author and 2 dimensions".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let jitter = Normal::new(0.0, noise.max(0.0)).map_err(|e| e.to_string())?;
    let centres: Vec<Vec<f64>> = (0..authors).map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut rows = Vec::with_capacity(authors * per_author);
    let mut labels = Vec::with_capacity(authors * per_author);
    for (a, c) in centres.iter().enumerate() {
        for _ in 0..per_author {
            rows.push(c.iter().map(|x| x + jitter.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(a);
        }
    }
    let z = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    Ok(RetrievalDemo {
        cosine: evaluate(&z, &labels, Measure::Cosine).map_err(|e| e.to_string())?,
        euclidean: evaluate(&z, &labels, Measure::Euclidean).map_err(|e| e.to_string())?,
        points: rows.iter().map(|r| [r[0], r[1]]).collect(),
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spreading {
    /// Class means after each recorded step, each a list of 2-d points.
    pub frames: Vec<Vec<[f64; 2]>>,
    pub loss: Vec<f64>,
    /// Minimum pairwise angle in radians per recorded frame.
    pub min_angle: Vec<f64>,
}

/// Gradient descent on the negative block term alone, starting from class
/// means bunched around one direction.
pub fn spread(classes: usize, tau: f64, steps: usize, lr: f64, seed: u64) -> Result<Spreading, String> {
    if classes < 2 {
        return Err("need at least 2 classes".into());
    }
    let cfg = loss_config(tau);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bunch = Normal::new(0.0, 0.3).map_err(|e| e.to_string())?;
    let mut means: Vec<f64> = (0..classes)
        .flat_map(|_| {
            let a: f64 = bunch.sample(&mut rng);
            [a.cos(), a.sin()]
        })
        .collect();
    let labels: Vec<usize> = (0..classes).collect();
    let every = (steps / 60).max(1);
    let mut out = Spreading {
        frames: Vec::new(),
        loss: Vec::new(),
        min_angle: Vec::new(),
    };
    for step in 0..=steps {
        let m = Tensor::matrix(classes, 2, means.clone()).map_err(|e| e.to_string())?;
        let mut t = Tape::new();
        let v = t.param(m.clone());
        let term = negative_block_term(&mut t, v, &cfg).map_err(|e| e.to_string())?;
        let value = t.value(term.loss).item();
        if step % every == 0 || step == steps {
            out.frames.push(means.chunks(2).map(|p| [p[0], p[1]]).collect());
            out.loss.push(value);
            out.min_angle.push(min_class_mean_angle(&m, &labels).map_err(|e| e.to_string())?);
        }
        if step == steps {
            break;
        }
        t.backward(term.loss).map_err(|e| e.to_string())?;
        let g = t.grad(v).ok_or("no gradient")?;
        for (p, d) in means.iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
        for p in means.chunks_mut(2) {
            let n = p[0].hypot(p[1]).max(1e-12);
            p[0] /= n;
            p[1] /= n;
        }
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = landscape)]
pub fn landscape_js(tau: f64, classes: usize, points: usize) -> Result<String, JsValue> {
    to_js(landscape(tau, classes, points))
}

#[wasm_bindgen(js_name = retrieval)]
pub fn retrieval_js(authors: usize, per_author: usize, dim: usize, noise: f64, seed: u32) -> Result<String, JsValue> {
    to_js(retrieval(authors, per_author, dim, noise, seed.into()))
}

#[wasm_bindgen(js_name = spread)]
pub fn spread_js(classes: usize, tau: f64, steps: usize, lr: f64, seed: u32) -> Result<String, JsValue> {
    to_js(spread(classes, tau, steps, lr, seed.into()))
}
