//! Loss values against hand-composed straight-line pipelines.

use talkdist::comm::{ChannelConfig, CommChannel};
use talkdist::losses;
use talkdist::nets::HiddenStates;
use talkdist::rng::Rng;
use talkdist::tape::{Mode, Tape};
use talkdist::testkit::straightline::{self, M};

fn states(tape: &mut Tape, s: &[f32], e: &[f32], bsz: usize) -> HiddenStates {
    let sw = s.len() / bsz;
    let ew = e.len() / bsz;
    let sv = tape.constant(vec![bsz, sw], s.to_vec()).unwrap();
    let ev = tape.constant(vec![bsz, ew], e.to_vec()).unwrap();
    let cat = tape.concat(&[sv, ev]).unwrap();
    HiddenStates { s: sv, e: ev, cat }
}

/// fitnet on a random instance equals decode-then-mse composed by hand.
#[test]
fn fitnet_matches_hand_composition() {
    let mut rng = Rng::new(17);
    let cfg = ChannelConfig { s_width: 3, e_width: 2, hidden: 4, message_dim: 9, dropout: 0.0 };
    let teacher_state_width = 7;
    let ch = CommChannel::decoder_only("g", &cfg, teacher_state_width, &mut rng);

    let s_g: Vec<f32> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let e_g: Vec<f32> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let s_h: Vec<f32> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let e_h: Vec<f32> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let mut tape = Tape::new();
    let st_g = states(&mut tape, &s_g, &e_g, 2);
    let st_h = states(&mut tape, &s_h, &e_h, 2);
    let loss =
        losses::l_fitnet(&mut tape, &st_g, &st_h, &ch, Mode::Eval, &mut rng).unwrap();

    // Hand composition: teacher states through the decoder block, then mse.
    let cat_g = {
        let mut v = Vec::new();
        for r in 0..2 {
            v.extend_from_slice(&s_g[r * 3..(r + 1) * 3]);
            v.extend_from_slice(&e_g[r * 2..(r + 1) * 2]);
        }
        M { rows: 2, cols: 5, v }
    };
    let cat_h = {
        let mut v = Vec::new();
        for r in 0..2 {
            v.extend_from_slice(&s_h[r * 4..(r + 1) * 4]);
            v.extend_from_slice(&e_h[r * 3..(r + 1) * 3]);
        }
        M { rows: 2, cols: 7, v }
    };
    let mut unused = Rng::new(0);
    let decoded = straightline::comm_mlp(
        &ch.decoder.as_ref().unwrap().mlp,
        &cat_h,
        0.0,
        &mut unused,
    );
    let expected = straightline::mse(&cat_g, &decoded);
    let got = tape.scalar(loss);
    assert!(
        (got - expected).abs() <= 1e-6 * expected.abs().max(1.0),
        "{got} vs {expected}"
    );
}

/// interact on a random instance equals mse of the hand-concatenated pair.
#[test]
fn interact_matches_hand_mse() {
    let mut rng = Rng::new(18);
    let cur: Vec<f32> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let dec: Vec<f32> = (0..10).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 5], cur.clone()).unwrap();
    let b = tape.constant(vec![2, 5], dec.clone()).unwrap();
    let loss = losses::l_interact(&mut tape, a, b).unwrap();
    let hand: f64 = cur
        .iter()
        .zip(dec.iter())
        .map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2))
        .sum::<f64>()
        / 10.0;
    assert!((tape.scalar(loss) as f64 - hand).abs() < 1e-7);
}
