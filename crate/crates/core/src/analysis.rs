//! Post-hoc instrumentation over captured forward traces: attention entropy,
//! gate statistics, landmark firing by token class and rotary channel norms.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::model::{Capture, Network, Scalar, Trace};
use crate::niah::{NiahSample, NiahVocab};
use crate::numerics::Matrix;
use crate::{Error, Result};

fn traces<F: Scalar>(net: &Network<F>, samples: &[NiahSample], capture: Capture) -> Result<Vec<Trace>> {
    samples
        .par_iter()
        .map(|s| net.forward(&s.tokens, Some(capture)).map(|(_, t)| t.expect("trace requested")))
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-(layer, head) attention entropy. `per_sample[l][h][s]` is the mean
/// over query rows of sample `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyProfile {
    pub per_sample: Vec<Vec<Vec<f64>>>,
}

impl EntropyProfile {
    pub fn n_layers(&self) -> usize {
        self.per_sample.len()
    }

    pub fn mean_std(&self, layer: usize, head: usize) -> (f64, f64) {
        mean_std(&self.per_sample[layer][head])
    }

    /// Mean over heads and samples of one layer.
    pub fn layer_mean(&self, layer: usize) -> f64 {
        let heads = &self.per_sample[layer];
        heads.iter().map(|h| mean_std(h).0).sum::<f64>() / heads.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,mean_H,std_H\n");
        for (l, heads) in self.per_sample.iter().enumerate() {
            for h in 0..heads.len() {
                let (m, sd) = self.mean_std(l, h);
                let _ = writeln!(s, "{l},{h},{m:.6},{sd:.6}");
            }
        }
        s
    }
}

pub fn entropy_profile<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<EntropyProfile> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let ts = traces(net, samples, Capture::NONE)?;
    let (nl, nh) = (net.cfg.n_layer, net.cfg.n_head);
    let per_sample = (0..nl)
        .map(|l| {
            (0..nh)
                .map(|h| {
                    ts.iter()
                        .map(|t| {
                            let e = &t.layers[l][h].entropy;
                            e.iter().sum::<f64>() / e.len() as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(EntropyProfile { per_sample })
}

/// Mean entropy per layer over heads, rows and samples.
pub fn layer_entropy_means<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<Vec<f64>> {
    let p = entropy_profile(net, samples)?;
    Ok((0..p.n_layers()).map(|l| p.layer_mean(l)).collect())
}

/// `ΔH = H(a) - H(b)` per (layer, head); both profiles must come from the
/// same samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyDelta {
    pub delta: Vec<Vec<f64>>,
}

impl EntropyDelta {
    pub fn layer_mean(&self, layer: usize) -> f64 {
        let row = &self.delta[layer];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,delta_H\n");
        for (l, heads) in self.delta.iter().enumerate() {
            for (h, d) in heads.iter().enumerate() {
                let _ = writeln!(s, "{l},{h},{d:.6}");
            }
        }
        s
    }
}

pub fn entropy_delta(a: &EntropyProfile, b: &EntropyProfile) -> Result<EntropyDelta> {
    let shape = |p: &EntropyProfile| -> Vec<Vec<usize>> {
        p.per_sample.iter().map(|hs| hs.iter().map(Vec::len).collect()).collect()
    };
    if shape(a) != shape(b) {
        return Err(Error::DimensionMismatch("entropy profiles cover different layers, heads or samples".into()));
    }
    let delta = a
        .per_sample
        .iter()
        .zip(&b.per_sample)
        .map(|(ha, hb)| ha.iter().zip(hb).map(|(x, y)| mean_std(x).0 - mean_std(y).0).collect())
        .collect();
    Ok(EntropyDelta { delta })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGateStats {
    pub layer: usize,
    pub head: usize,
    pub mask_mean: f64,
    pub l_mean: f64,
    pub g_mean: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub heads: Vec<HeadGateStats>,
}

impl GateStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,M_bar,l_bar,g_bar,Gamma\n");
        for h in &self.heads {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                h.layer, h.head, h.mask_mean, h.l_mean, h.g_mean, h.gamma
            );
        }
        s
    }
}

fn require_gates<F: Scalar>(net: &Network<F>) -> Result<()> {
    if net.cfg.gape {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} model has no gates", net.cfg.label())))
    }
}

/// Means of `M`, `l`, `g` and `Γ` per head over a reference batch.
pub fn gate_stats<F: Scalar>(net: &Network<F>, batch: &[NiahSample]) -> Result<GateStats> {
    require_gates(net)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty reference batch".into()));
    }
    let ts = traces(net, batch, Capture::NONE)?;
    let mut heads = Vec::new();
    for l in 0..net.cfg.n_layer {
        for h in 0..net.cfg.n_head {
            let (mut m, mut lsum, mut ln, mut gsum, mut gn, mut gamma) = (0.0, 0.0, 0usize, 0.0, 0usize, 0.0);
            for t in &ts {
                let gt = t.layers[l][h].gates.as_ref().expect("gated model");
                m += gt.mask_mean;
                lsum += gt.l.iter().sum::<f64>();
                ln += gt.l.len();
                gsum += gt.g.iter().sum::<f64>();
                gn += gt.g.len();
                gamma += gt.gamma;
            }
            let n = ts.len() as f64;
            heads.push(HeadGateStats {
                layer: l,
                head: h,
                mask_mean: m / n,
                l_mean: lsum / ln as f64,
                g_mean: gsum / gn as f64,
                gamma: gamma / n,
            });
        }
    }
    Ok(GateStats { heads })
}

/// Mean landmark value by token class for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkByClass {
    pub layer: usize,
    pub head: usize,
    pub key_mean: f64,
    pub digit_mean: f64,
    /// Over `KEY` and needle-digit positions together.
    pub needle_mean: f64,
    pub filler_mean: f64,
}

impl LandmarkByClass {
    pub fn ratio(&self) -> f64 {
        self.needle_mean / self.filler_mean
    }
}

pub fn landmark_by_class<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<Vec<LandmarkByClass>> {
    require_gates(net)?;
    let vocab = NiahVocab::standard();
    let ts = traces(net, samples, Capture::NONE)?;
    let mut out = Vec::new();
    for l in 0..net.cfg.n_layer {
        for h in 0..net.cfg.n_head {
            let mut acc = [(0.0, 0usize); 3];
            for (t, s) in ts.iter().zip(samples) {
                let lv = &t.layers[l][h].gates.as_ref().expect("gated model").l;
                for &p in &s.needle_positions {
                    acc[0].0 += lv[p];
                    acc[0].1 += 1;
                    acc[1].0 += lv[p + 2];
                    acc[1].1 += 1;
                }
                for (j, &tok) in s.tokens.iter().enumerate() {
                    if vocab.is_filler(tok) {
                        acc[2].0 += lv[j];
                        acc[2].1 += 1;
                    }
                }
            }
            let mean = |(s, n): (f64, usize)| s / n as f64;
            out.push(LandmarkByClass {
                layer: l,
                head: h,
                key_mean: mean(acc[0]),
                digit_mean: mean(acc[1]),
                needle_mean: (acc[0].0 + acc[1].0) / (acc[0].1 + acc[1].1) as f64,
                filler_mean: mean(acc[2]),
            });
        }
    }
    Ok(out)
}

pub fn landmark_csv(rows: &[LandmarkByClass]) -> String {
    let mut s = String::from("layer,head,key_l,digit_l,needle_l,filler_l,ratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
            r.layer,
            r.head,
            r.key_mean,
            r.digit_mean,
            r.needle_mean,
            r.filler_mean,
            r.ratio()
        );
    }
    s
}

/// Mean query gate `g` at the final (query) position, per (layer, head).
pub fn query_gate_at_end<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<Vec<Vec<f64>>> {
    require_gates(net)?;
    let ts = traces(net, samples, Capture::NONE)?;
    Ok((0..net.cfg.n_layer)
        .map(|l| {
            (0..net.cfg.n_head)
                .map(|h| {
                    ts.iter().map(|t| *t.layers[l][h].gates.as_ref().expect("gated").g.last().expect("row")).sum::<f64>()
                        / ts.len() as f64
                })
                .collect()
        })
        .collect())
}

/// Mean Euclidean norm of each 2-D chunk `(2c, 2c+1)` over the rows of `m`.
pub fn chunk_norms(m: &Matrix, n_chunks: usize) -> Result<Vec<f64>> {
    if 2 * n_chunks > m.cols() {
        return Err(Error::DimensionMismatch(format!("{n_chunks} chunks in {} columns", m.cols())));
    }
    let rows = m.rows().max(1) as f64;
    Ok((0..n_chunks)
        .map(|c| {
            (0..m.rows())
                .map(|r| {
                    let (x, y) = (m.get(r, 2 * c), m.get(r, 2 * c + 1));
                    (x * x + y * y).sqrt()
                })
                .sum::<f64>()
                / rows
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub layer: usize,
    pub head: usize,
    pub channel: usize,
    pub freq: f64,
    pub q_norm: f64,
    pub k_norm: f64,
}

/// Per rotary chunk mean q/k norms over the sample rows, grouped by frequency.
pub fn channel_norms<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<Vec<ChannelNorm>> {
    let cfg = &net.cfg;
    let Some((spectrum, dims)) = cfg.kind.rotation(cfg.qk_dim)? else {
        return Err(Error::NoRotaryChannels(format!("{} checkpoint", cfg.label())));
    };
    let n_chunks = dims / 2;
    if n_chunks == 0 {
        return Err(Error::NoRotaryChannels(format!("{} checkpoint rotates no chunks", cfg.label())));
    }
    let ts = traces(net, samples, Capture { weights: false, qk: true })?;
    let mut out = Vec::new();
    for l in 0..cfg.n_layer {
        for h in 0..cfg.n_head {
            let (mut q, mut k, mut nq, mut nk) = (vec![0.0; n_chunks], vec![0.0; n_chunks], 0.0, 0.0);
            for t in &ts {
                let ht = &t.layers[l][h];
                let (qm, km) = (ht.q.as_ref().expect("qk captured"), ht.k.as_ref().expect("qk captured"));
                for (acc, x) in q.iter_mut().zip(chunk_norms(qm, n_chunks)?) {
                    *acc += x * qm.rows() as f64;
                }
                for (acc, x) in k.iter_mut().zip(chunk_norms(km, n_chunks)?) {
                    *acc += x * km.rows() as f64;
                }
                nq += qm.rows() as f64;
                nk += km.rows() as f64;
            }
            for c in 0..n_chunks {
                out.push(ChannelNorm {
                    layer: l,
                    head: h,
                    channel: c,
                    freq: spectrum.freqs()[c],
                    q_norm: q[c] / nq,
                    k_norm: k[c] / nk,
                });
            }
        }
    }
    Ok(out)
}

pub fn channels_csv(rows: &[ChannelNorm]) -> String {
    let mut s = String::from("layer,head,channel_idx,freq,q_norm,k_norm\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6e},{:.6},{:.6}", r.layer, r.head, r.channel, r.freq, r.q_norm, r.k_norm);
    }
    s
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Correlation between per-(sample, layer) mean query gate and mean
/// attention entropy. Reported, not asserted.
pub fn gate_entropy_correlation<F: Scalar>(net: &Network<F>, samples: &[NiahSample]) -> Result<Option<f64>> {
    require_gates(net)?;
    let ts = traces(net, samples, Capture::NONE)?;
    let (mut gs, mut hs) = (Vec::new(), Vec::new());
    for t in &ts {
        for layer in &t.layers {
            let mut g = 0.0;
            let mut h = 0.0;
            for head in layer {
                let gt = head.gates.as_ref().expect("gated");
                g += gt.g.iter().sum::<f64>() / gt.g.len() as f64;
                h += head.entropy.iter().sum::<f64>() / head.entropy.len() as f64;
            }
            gs.push(g / layer.len() as f64);
            hs.push(h / layer.len() as f64);
        }
    }
    Ok(pearson(&gs, &hs))
}
