//! Straight-line reimplementation of the interactive training objective:
//! hand-chained ops on flat buffers, no tape, no graph. RNG consumption
//! (dropout masks, noise draws) mirrors the engine call-for-call so
//! stochastic configurations compare exactly.

use crate::comm::{CommChannel, CommMlp};
use crate::engine::TrainConfig;
use crate::nets::{DenseLayer, PartitionedNet};
use crate::rng::Rng;

#[derive(Clone)]
pub struct M {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f32>,
}

pub fn matmul(a: &M, w: &[f32], out_cols: usize) -> M {
    let inner = a.cols;
    let mut v = vec![0.0f32; a.rows * out_cols];
    for i in 0..a.rows {
        let mut acc = vec![0.0f64; out_cols];
        for k in 0..inner {
            let aik = a.v[i * inner + k] as f64;
            if aik == 0.0 {
                continue;
            }
            for j in 0..out_cols {
                acc[j] += aik * w[k * out_cols + j] as f64;
            }
        }
        for j in 0..out_cols {
            v[i * out_cols + j] = acc[j] as f32;
        }
    }
    M { rows: a.rows, cols: out_cols, v }
}

pub fn add_bias(mut x: M, b: &[f32]) -> M {
    for r in 0..x.rows {
        for j in 0..x.cols {
            x.v[r * x.cols + j] += b[j];
        }
    }
    x
}

pub fn relu(mut x: M) -> M {
    for v in x.v.iter_mut() {
        *v = v.max(0.0);
    }
    x
}

pub fn layer_norm(mut x: M, gamma: &[f32], beta: &[f32]) -> M {
    let d = x.cols;
    for r in 0..x.rows {
        let row = &mut x.v[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            row[j] = (xhat * gamma[j] as f64 + beta[j] as f64) as f32;
        }
    }
    x
}

/// Mirrors the tape's draw order: one uniform per element, row-major.
pub fn dropout(mut x: M, rate: f32, rng: &mut Rng) -> M {
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let inv = 1.0 / keep;
    for v in x.v.iter_mut() {
        *v = if rng.next_f32() < keep { *v * inv } else { 0.0 };
    }
    x
}

pub fn concat2(a: &M, b: &M) -> M {
    let cols = a.cols + b.cols;
    let mut v = vec![0.0f32; a.rows * cols];
    for r in 0..a.rows {
        v[r * cols..r * cols + a.cols].copy_from_slice(&a.v[r * a.cols..(r + 1) * a.cols]);
        v[r * cols + a.cols..(r + 1) * cols].copy_from_slice(&b.v[r * b.cols..(r + 1) * b.cols]);
    }
    M { rows: a.rows, cols, v }
}

pub fn split2(x: &M, left: usize) -> (M, M) {
    let right = x.cols - left;
    let mut a = vec![0.0f32; x.rows * left];
    let mut b = vec![0.0f32; x.rows * right];
    for r in 0..x.rows {
        a[r * left..(r + 1) * left].copy_from_slice(&x.v[r * x.cols..r * x.cols + left]);
        b[r * right..(r + 1) * right]
            .copy_from_slice(&x.v[r * x.cols + left..(r + 1) * x.cols]);
    }
    (M { rows: x.rows, cols: left, v: a }, M { rows: x.rows, cols: right, v: b })
}

pub fn mse(a: &M, b: &M) -> f32 {
    let sum: f64 = a
        .v
        .iter()
        .zip(b.v.iter())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    (sum / a.v.len() as f64) as f32
}

pub fn dense(layer: &DenseLayer, x: &M) -> M {
    add_bias(matmul(x, &layer.w.data, layer.out_width()), &layer.b.data)
}

/// dense -> relu -> layer_norm -> dropout -> dense, mirroring the channel
/// block.
pub fn comm_mlp(mlp: &CommMlp, x: &M, dropout_rate: f32, rng: &mut Rng) -> M {
    let h = relu(dense(&mlp.fc1, x));
    let h = layer_norm(h, &mlp.gamma.data, &mlp.beta.data);
    let h = dropout(h, dropout_rate, rng);
    dense(&mlp.fc2, &h)
}

/// Body forward (dropout after each hidden relu when a rate and rng are
/// given). Returns (s, e, y).
pub fn body_forward(
    net: &PartitionedNet,
    x: &M,
    dropout_rate: f32,
    rng: Option<&mut Rng>,
) -> (M, M, M) {
    let part = net.partition();
    let mut local = Rng::new(0);
    let rng = match rng {
        Some(r) => r,
        None => &mut local,
    };
    let mut cur = x.clone();
    let mut s = None;
    let mut e = None;
    for idx in 0..part.total {
        cur = dense(net.layer(idx), &cur);
        if idx + 1 < part.total {
            cur = relu(cur);
            if dropout_rate > 0.0 {
                cur = dropout(cur, dropout_rate, rng);
            }
        }
        if idx + 1 == part.lower {
            s = Some(cur.clone());
        }
        if idx + 1 == part.higher {
            e = Some(cur.clone());
        }
    }
    (s.unwrap(), e.unwrap(), cur)
}

/// Middle block only (layers l+1..h).
pub fn body_middle(net: &PartitionedNet, s_in: &M, dropout_rate: f32, rng: Option<&mut Rng>) -> M {
    let part = net.partition();
    let mut local = Rng::new(0);
    let rng = match rng {
        Some(r) => r,
        None => &mut local,
    };
    let mut cur = s_in.clone();
    for idx in part.lower..part.higher {
        cur = dense(net.layer(idx), &cur);
        if idx + 1 < part.total {
            cur = relu(cur);
            if dropout_rate > 0.0 {
                cur = dropout(cur, dropout_rate, rng);
            }
        }
    }
    cur
}

pub struct Pipeline<'a> {
    pub teacher: &'a PartitionedNet,
    pub student: &'a PartitionedNet,
    pub student_channel: &'a CommChannel,
    pub teacher_channel: &'a CommChannel,
    pub net_dropout: f32,
    pub channel_dropout: f32,
}

/// Total objective of one interactive step, straight-line.
pub fn total_loss(p: &Pipeline, x: &M, targets: &[f32], cfg: &TrainConfig, seed: u64) -> f32 {
    let w = &cfg.weights;
    let mut student_drop = Rng::derive(seed, "dropout.student");
    let mut channel_drop = Rng::derive(seed, "dropout.channels");
    let mut noise_rng = Rng::derive(seed, "noise");

    let (s_g, e_g, y_g) = body_forward(p.student, x, p.net_dropout, Some(&mut student_drop));
    let st_g = concat2(&s_g, &e_g);
    let target_m = M { rows: y_g.rows, cols: y_g.cols, v: targets.to_vec() };
    let gt = mse(&y_g, &target_m);

    let need_loop = w.interact > 0.0;
    let need_mc = w.mc > 0.0;
    let need_sc = w.sc > 0.0;

    let m_g0 = if need_loop || need_mc || need_sc {
        let enc = p.student_channel.encoder.as_ref().unwrap();
        Some(comm_mlp(&enc.mlp, &st_g, p.channel_dropout, &mut channel_drop))
    } else {
        None
    };
    let (st_h, m_h0) = if need_mc || need_sc {
        // Teacher runs in eval mode: no dropout, no draws.
        let (s_h, e_h, _) = body_forward(p.teacher, x, 0.0, None);
        let st_h = concat2(&s_h, &e_h);
        let enc = p.teacher_channel.encoder.as_ref().unwrap();
        let m_h0 = comm_mlp(&enc.mlp, &st_h, p.channel_dropout, &mut channel_drop);
        (Some(st_h), Some(m_h0))
    } else {
        (None, None)
    };

    let mc = if need_mc { Some(mse(m_g0.as_ref().unwrap(), m_h0.as_ref().unwrap())) } else { None };
    let sc = if need_sc {
        let dec_g = p.student_channel.decoder.as_ref().unwrap();
        let rec_g =
            comm_mlp(&dec_g.mlp, m_h0.as_ref().unwrap(), p.channel_dropout, &mut channel_drop);
        let t1 = mse(&st_g, &rec_g);
        let dec_h = p.teacher_channel.decoder.as_ref().unwrap();
        let rec_h =
            comm_mlp(&dec_h.mlp, m_g0.as_ref().unwrap(), p.channel_dropout, &mut channel_drop);
        let t2 = mse(st_h.as_ref().unwrap(), &rec_h);
        Some(t1 + t2)
    } else {
        None
    };

    let mut interact: Vec<f32> = Vec::new();
    if need_loop {
        let mut current = st_g.clone();
        let mut m_g_i = m_g0.unwrap();
        let s_w_teacher = p.teacher.s_width();
        let s_w_student = p.student.s_width();
        for i in 0..=cfg.iterations {
            let dec_h = p.teacher_channel.decoder.as_ref().unwrap();
            let decoded_h = comm_mlp(&dec_h.mlp, &m_g_i, p.channel_dropout, &mut channel_drop);
            let (mut s_h_prime, _e_h_prime) = split2(&decoded_h, s_w_teacher);
            if let Some(sigma) = cfg.noise_sigma {
                if sigma > 0.0 {
                    for v in s_h_prime.v.iter_mut() {
                        *v += sigma * noise_rng.normal();
                    }
                }
            }
            let e_h_tilde = body_middle(p.teacher, &s_h_prime, 0.0, None);
            let reply = concat2(&s_h_prime, &e_h_tilde);
            let enc_h = p.teacher_channel.encoder.as_ref().unwrap();
            let m_h_next = comm_mlp(&enc_h.mlp, &reply, p.channel_dropout, &mut channel_drop);
            let dec_g = p.student_channel.decoder.as_ref().unwrap();
            let decoded_g = comm_mlp(&dec_g.mlp, &m_h_next, p.channel_dropout, &mut channel_drop);
            interact.push(mse(&current, &decoded_g));
            let (s_g_prime, _e_g_prime) = split2(&decoded_g, s_w_student);
            let e_g_tilde =
                body_middle(p.student, &s_g_prime, p.net_dropout, Some(&mut student_drop));
            current = concat2(&s_g_prime, &e_g_tilde);
            if i < cfg.iterations {
                let enc_g = p.student_channel.encoder.as_ref().unwrap();
                m_g_i = comm_mlp(&enc_g.mlp, &current, p.channel_dropout, &mut channel_drop);
            }
        }
    }

    let mut total = gt;
    if w.interact > 0.0 {
        for t in &interact {
            total += w.interact * t;
        }
    }
    if let (true, Some(mc)) = (w.mc > 0.0, mc) {
        total += w.mc * mc;
    }
    if let (true, Some(sc)) = (w.sc > 0.0, sc) {
        total += w.sc * sc;
    }
    total
}
