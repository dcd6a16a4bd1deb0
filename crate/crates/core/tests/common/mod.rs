// Straight-line reference implementations over nested vectors. Nothing here
// touches the tape; each function follows the textbook definition loop by
// loop so it can serve as an independent oracle.
#![allow(dead_code)]

pub mod properties;

use gmt_core::memory_cell::{sigmoid, MemoryCell};
use gmt_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.shape());
    let mut worst: f64 = 0.0;
    for (i, r) in a.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            worst = worst.max((x - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &Rows, gain: &[f64], bias: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            (0..r.len())
                .map(|j| (r[j] - mean) / sd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn transitions(e: &Rows) -> Rows {
    let f = e.len();
    let mut p = vec![vec![0.0; f]; f];
    for i in 0..f {
        let mut m = f64::NEG_INFINITY;
        for j in 0..f {
            if j != i {
                m = m.max(e[i][j]);
            }
        }
        let mut s = 0.0;
        for j in 0..f {
            if j != i {
                p[i][j] = (e[i][j] - m).exp();
                s += p[i][j];
            }
        }
        for j in 0..f {
            p[i][j] /= s;
        }
    }
    p
}

pub fn source_routing(z: &Rows, c_tilde: &Rows, tau: f64, eps_grav: f64) -> Rows {
    z.iter()
        .map(|zr| {
            let zn = norm(zr);
            let logits: Vec<f64> = c_tilde
                .iter()
                .map(|c| {
                    let s = dot(zr, c) / (zn * norm(c));
                    let dist = if 1.0 - s > eps_grav {
                        1.0 - s
                    } else {
                        eps_grav
                    };
                    1.0 / (tau * dist)
                })
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn target_selection(
    z: &Rows,
    w_src: &Rows,
    p: &Rows,
    w_q: &Rows,
    w_k: &Rows,
    c_tilde: &Rows,
) -> (Rows, Rows) {
    let w_edge = matmul(w_src, p);
    let q = matmul(z, w_q);
    let k = matmul(c_tilde, w_k);
    let d = w_q[0].len() as f64;
    let w_tgt = (0..z.len())
        .map(|t| {
            let logits: Vec<f64> = (0..c_tilde.len())
                .map(|i| w_edge[t][i] + dot(&q[t], &k[i]) / d.sqrt())
                .collect();
            softmax(&logits)
        })
        .collect();
    (w_edge, w_tgt)
}

pub struct Readout {
    pub c_src: Rows,
    pub c_tgt: Rows,
    pub d: Rows,
}

pub fn displacement_readout(
    w_src: &Rows,
    w_tgt: &Rows,
    c_tilde: &Rows,
    gain: &[f64],
    bias: &[f64],
    gate: f64,
    ln_eps: f64,
) -> Readout {
    let c_src = matmul(w_src, c_tilde);
    let c_tgt = matmul(w_tgt, c_tilde);
    let delta: Rows = c_src
        .iter()
        .zip(&c_tgt)
        .map(|(a, b)| b.iter().zip(a).map(|(x, y)| x - y).collect())
        .collect();
    let g = sigmoid(gate);
    let d = layer_norm(&delta, gain, bias, ln_eps)
        .into_iter()
        .map(|r| r.into_iter().map(|v| g * v).collect())
        .collect();
    Readout { c_src, c_tgt, d }
}

/// Returns (new centroids, new ages).
pub fn write_back(
    centroids: &Rows,
    age: &[u64],
    momentum: f64,
    states: &Rows,
    w_src: &Rows,
    eps_count: f64,
) -> (Rows, Vec<u64>) {
    let (f, h) = (centroids.len(), centroids[0].len());
    let m = sigmoid(momentum);
    let mut out = centroids.clone();
    for i in 0..f {
        let mut sum = vec![0.0; h];
        let mut count = 0usize;
        for (t, w) in w_src.iter().enumerate() {
            let mut best = 0;
            for j in 1..f {
                if w[j] > w[best] {
                    best = j;
                }
            }
            if best == i {
                count += 1;
                for k in 0..h {
                    sum[k] += states[t][k];
                }
            }
        }
        let denom = if (count as f64) > eps_count {
            count as f64
        } else {
            eps_count
        };
        for k in 0..h {
            out[i][k] = m * centroids[i][k] + (1.0 - m) * sum[k] / denom;
        }
        let n = norm(&out[i]);
        if n > 0.0 {
            for k in 0..h {
                out[i][k] /= n;
            }
        }
    }
    (out, age.iter().map(|a| a + 1).collect())
}

/// Causal multi-head attention on packed `[Q | K | V]` columns (one batch
/// element at a time), followed by the output projection.
pub fn attention(
    x: &Rows,
    ln: (&[f64], &[f64]),
    w_qkv: &Rows,
    w_o: &Rows,
    batch: usize,
    heads: usize,
    ln_eps: f64,
) -> Rows {
    let a = layer_norm(x, ln.0, ln.1, ln_eps);
    let qkv = matmul(&a, w_qkv);
    let hidden = w_o.len();
    let dh = hidden / heads;
    let seq = x.len() / batch;
    let mut cat = vec![vec![0.0; hidden]; x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let qi = &qkv[b * seq + i][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = &qkv[b * seq + j][hidden + h * dh..hidden + (h + 1) * dh];
                        dot(qi, kj) / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    let vj = &qkv[b * seq + j][2 * hidden + h * dh..2 * hidden + (h + 1) * dh];
                    for k in 0..dh {
                        cat[b * seq + i][h * dh + k] += pj * vj[k];
                    }
                }
            }
        }
    }
    matmul(&cat, w_o)
}

pub fn tracking(x_next: &Rows, w_src: &Rows, c_tilde: &Rows, momentum: f64) -> f64 {
    let recon = matmul(w_src, c_tilde);
    let mut s = 0.0;
    let mut n = 0usize;
    for (a, b) in x_next.iter().zip(&recon) {
        for (x, y) in a.iter().zip(b) {
            s += (x - y) * (x - y);
            n += 1;
        }
    }
    (1.0 - sigmoid(momentum)) * s / n as f64
}

pub fn orthogonality(c: &Rows) -> f64 {
    let f = c.len();
    let mut s = 0.0;
    for i in 0..f {
        for j in 0..f {
            if i != j {
                let cos = dot(&c[i], &c[j]) / (norm(&c[i]) * norm(&c[j]));
                s += cos * cos;
            }
        }
    }
    s / (f * (f - 1)) as f64
}

pub fn clustering(w_src: &Rows, n_target: f64, eps: f64) -> f64 {
    let f = w_src[0].len();
    let n = w_src.len() as f64;
    let ubar: Vec<f64> = (0..f)
        .map(|i| w_src.iter().map(|r| r[i]).sum::<f64>() / n)
        .collect();
    let total: f64 = ubar.iter().sum::<f64>() + eps;
    let mut h = 0.0;
    for u in &ubar {
        let p = u / total;
        h -= p * (p + eps).ln();
    }
    let n_eff = h.exp().max(1.0);
    (n_target / n_eff - 1.0).max(0.0)
}

pub fn edge_entropy(p: &Rows, h_target: f64, eps: f64) -> f64 {
    let mut s = 0.0;
    for r in p {
        let h: f64 = r.iter().map(|&x| -x * (x + eps).ln()).sum();
        s += (h_target - h).max(0.0);
    }
    s / p.len() as f64
}

pub fn edge_contrast(p: &Rows) -> f64 {
    let f = p.len();
    let mut s = 0.0;
    for i in 0..f {
        for j in 0..f {
            if i != j {
                s += dot(&p[i], &p[j]) / (norm(&p[i]) * norm(&p[j]));
            }
        }
    }
    s / (f * (f - 1)) as f64
}

/// A randomized cell with non-trivial LN affines, edges, gate and momentum,
/// plus a batch of token states routed through it.
pub struct CellCase {
    pub cell: MemoryCell,
    pub z: Matrix,
    pub tau: f64,
    pub eps_grav: f64,
    pub ln_eps: f64,
}

pub fn cell_case(seed: u64) -> CellCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = rng.gen_range(2..=9);
    let hidden = rng.gen_range(2..=12);
    let nav = rng.gen_range(1..=6);
    let tokens = rng.gen_range(1..=10);
    let mut cell = MemoryCell::new(slots, hidden, nav, 0.5, &mut rng);
    cell.edges.edges = Matrix::randn(slots, slots, 1.5, &mut rng);
    cell.bank.ln_gain = Matrix::from_fn(1, hidden, |_, _| rng.gen_range(0.5..1.5));
    cell.bank.ln_bias = Matrix::randn(1, hidden, 0.3, &mut rng);
    cell.nav.ln_disp_gain = Matrix::from_fn(1, hidden, |_, _| rng.gen_range(0.5..1.5));
    cell.nav.ln_disp_bias = Matrix::randn(1, hidden, 0.3, &mut rng);
    cell.bank.gate = rng.gen_range(-3.0..3.0);
    cell.bank.momentum = rng.gen_range(-3.0..5.0);
    CellCase {
        z: Matrix::randn(tokens, hidden, 1.0, &mut rng),
        tau: rng.gen_range(0.1..=1.0),
        eps_grav: [1e-2, 1e-3, 0.2][rng.gen_range(0..3)],
        ln_eps: 1e-5,
        cell,
    }
}

fn bump(worst: &mut f64, e: f64) {
    assert!(e.is_finite(), "non-finite oracle gap");
    *worst = worst.max(e);
}

/// Largest absolute gap between every cell routine and its oracle over
/// `instances` seeded cases.
pub fn routing_gaps(instances: u64) -> [(&'static str, f64); 3] {
    use gmt_core::memory_cell::{
        displacement_readout as dr, normalized_centroids, source_routing as sr,
        target_selection as ts, transition_matrix,
    };
    use gmt_core::Tape;
    let (mut g_src, mut g_tgt, mut g_disp) = (0.0, 0.0, 0.0);
    for seed in 0..instances {
        let case = cell_case(seed);
        let mut tape = Tape::new();
        let vars = case.cell.bind(&mut tape);
        let z = tape.constant(case.z.clone());
        let ct = normalized_centroids(&mut tape, &vars, case.ln_eps).unwrap();
        let p = transition_matrix(&mut tape, vars.edges).unwrap();
        let w_src = sr(&mut tape, z, ct, case.tau, case.eps_grav).unwrap();
        let (w_edge, w_tgt) = ts(&mut tape, z, w_src, p, vars.w_q, vars.w_k, ct).unwrap();
        let (c_src, c_tgt, d) = dr(&mut tape, w_src, w_tgt, ct, &vars, case.ln_eps).unwrap();

        let bank = &case.cell.bank;
        let c_tilde = layer_norm(
            &rows(&bank.centroids),
            bank.ln_gain.row(0),
            bank.ln_bias.row(0),
            case.ln_eps,
        );
        let zr = rows(&case.z);
        let o_src = source_routing(&zr, &c_tilde, case.tau, case.eps_grav);
        bump(&mut g_src, max_diff(&o_src, tape.value(w_src)));

        let o_p = transitions(&rows(&case.cell.edges.edges));
        let (o_edge, o_tgt) = target_selection(
            &zr,
            &o_src,
            &o_p,
            &rows(&case.cell.nav.w_q),
            &rows(&case.cell.nav.w_k),
            &c_tilde,
        );
        bump(&mut g_tgt, max_diff(&o_p, tape.value(p)));
        bump(&mut g_tgt, max_diff(&o_edge, tape.value(w_edge)));
        bump(&mut g_tgt, max_diff(&o_tgt, tape.value(w_tgt)));

        let o = displacement_readout(
            &o_src,
            &o_tgt,
            &c_tilde,
            case.cell.nav.ln_disp_gain.row(0),
            case.cell.nav.ln_disp_bias.row(0),
            bank.gate,
            case.ln_eps,
        );
        bump(&mut g_disp, max_diff(&o.c_src, tape.value(c_src)));
        bump(&mut g_disp, max_diff(&o.c_tgt, tape.value(c_tgt)));
        bump(&mut g_disp, max_diff(&o.d, tape.value(d)));
    }
    [
        ("source_routing", g_src),
        ("target_selection", g_tgt),
        ("displacement_readout", g_disp),
    ]
}

pub fn loss_gaps(instances: u64) -> [(&'static str, f64); 5] {
    use gmt_core::memory_cell::{memory_cell_forward, CellSettings};
    use gmt_core::objectives::{
        clustering_loss, edge_contrast_loss, edge_entropy_loss, orthogonality_loss, tracking_loss,
    };
    use gmt_core::Tape;
    let mut gaps = [0.0f64; 5];
    for seed in 0..instances {
        let case = cell_case(1000 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = case.cell.bank.slots();
        let h = case.cell.bank.hidden();
        // Unnormalized centroids exercise the row normalization in the
        // orthogonality term.
        let mut cell = case.cell.clone();
        for r in 0..f {
            let s = rng.gen_range(0.2..3.0);
            cell.bank
                .centroids
                .row_mut(r)
                .iter_mut()
                .for_each(|c| *c *= s);
        }
        let n_target = rng.gen_range(0.5..=f as f64);
        let h_target = rng.gen_range(0.0..(f as f64).ln() + 0.5);
        let eps = 1e-8;

        let mut tape = Tape::new();
        let vars = cell.bind(&mut tape);
        let hv = tape.constant(case.z.clone());
        let ln2 = (
            tape.constant(Matrix::filled(1, h, 1.0)),
            tape.constant(Matrix::randn(1, h, 0.1, &mut rng)),
        );
        let settings = CellSettings {
            tau: case.tau,
            eps_grav: case.eps_grav,
            ln_eps: case.ln_eps,
            displacement_scale: 1.0,
        };
        let r = memory_cell_forward(&mut tape, hv, ln2, &vars, settings, None).unwrap();
        let track = tracking_loss(&mut tape, r.x_next, r.w_src, r.c_tilde, vars.momentum).unwrap();
        let ortho = orthogonality_loss(&mut tape, vars.centroids).unwrap();
        let cluster = clustering_loss(&mut tape, r.w_src, n_target, eps).unwrap();
        let edge = edge_entropy_loss(&mut tape, r.transitions, h_target, eps).unwrap();
        let contrast = edge_contrast_loss(&mut tape, r.transitions).unwrap();

        let x_next = rows(tape.value(r.x_next));
        let w_src = rows(tape.value(r.w_src));
        let c_tilde = rows(tape.value(r.c_tilde));
        let p = transitions(&rows(&cell.edges.edges));
        let expect = [
            tracking(&x_next, &w_src, &c_tilde, cell.bank.momentum),
            orthogonality(&rows(&cell.bank.centroids)),
            clustering(&w_src, n_target, eps),
            edge_entropy(&p, h_target, eps),
            edge_contrast(&p),
        ];
        let got = [track, ortho, cluster, edge, contrast].map(|v| tape.scalar(v));
        for k in 0..5 {
            bump(&mut gaps[k], (expect[k] - got[k]).abs());
        }
    }
    [
        ("tracking_loss", gaps[0]),
        ("orthogonality_loss", gaps[1]),
        ("clustering_loss", gaps[2]),
        ("edge_entropy_loss", gaps[3]),
        ("edge_contrast_loss", gaps[4]),
    ]
}

pub fn write_back_gap(instances: u64) -> f64 {
    use gmt_core::maintenance::write_back as wb;
    use gmt_core::memory_cell::CentroidBank;
    let mut worst = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let f = rng.gen_range(2..=10);
        let h = rng.gen_range(1..=12);
        let t = rng.gen_range(1..=24);
        let mut bank = CentroidBank::new(f, h, &mut rng);
        bank.momentum = rng.gen_range(-4.0..6.0);
        bank.age = (0..f).map(|_| rng.gen_range(0..500)).collect();
        let states = Matrix::randn(t, h, 2.0, &mut rng);
        let w = Matrix::from_fn(t, f, |_, _| rng.gen_range(-3.0..3.0));
        let w = Matrix::from_vec(t, f, w.row_iter().flat_map(softmax).collect()).unwrap();
        let (oc, oa) = write_back(
            &rows(&bank.centroids),
            &bank.age,
            bank.momentum,
            &rows(&states),
            &rows(&w),
            1e-6,
        );
        wb(&mut bank, &states, &w, 1e-6).unwrap();
        assert_eq!(bank.age, oa);
        bump(&mut worst, max_diff(&oc, &bank.centroids));
    }
    worst
}

pub fn attention_gap(instances: u64) -> f64 {
    use gmt_core::model::{attention_forward, Model, ModelConfig};
    use gmt_core::numerics::AttentionShape;
    use gmt_core::Tape;
    let mut worst = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let heads = rng.gen_range(1..=3);
        let dh = rng.gen_range(1..=5);
        let batch = rng.gen_range(1..=3);
        let seq = rng.gen_range(1..=6);
        let config = ModelConfig {
            n_layers: 1,
            hidden: heads * dh,
            n_heads: heads,
            nav_dim: 2,
            n_slots: 3,
            max_seq_len: seq,
            vocab_size: 5,
            ..ModelConfig::toy()
        };
        let model = Model::new(config.clone(), seed)
            .unwrap()
            .jittered(0.5, seed);
        let xm = Matrix::randn(batch * seq, config.hidden, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(xm.clone());
        let shape = AttentionShape { batch, seq, heads };
        let block = &vars.blocks[0];
        let out = attention_forward(&mut tape, x, block, shape, config.ln_eps, None).unwrap();
        let expect = attention(
            &rows(&xm),
            (
                tape.value(block.ln1.0).row(0),
                tape.value(block.ln1.1).row(0),
            ),
            &rows(tape.value(block.w_qkv)),
            &rows(tape.value(block.w_o)),
            batch,
            heads,
            config.ln_eps,
        );
        bump(&mut worst, max_diff(&expect, tape.value(out)));
    }
    worst
}

/// Every oracle comparison, in a fixed order.
pub fn all_gaps(instances: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = loss_gaps(instances).to_vec();
    out.extend(routing_gaps(instances));
    out.push(("write_back", write_back_gap(instances)));
    out.push(("attention_forward", attention_gap(instances)));
    out
}
