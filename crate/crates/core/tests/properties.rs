use std::collections::HashMap;

use mmlm::cells::CellKind;
use mmlm::data::{ContextStore, Vocabulary};
use mmlm::eval::{batches_nll, evaluate, nearest_neighbors, Condition};
use mmlm::lm::{FusionKind, Model, ModelConfig, SequenceBatch};
use mmlm::tensor::Tensor;
use mmlm::train::{sgd_step, TrainConfig, TrainState};
use proptest::prelude::*;
use rand::Rng;

const V: usize = 14;
const H: usize = 6;
const D: usize = 5;

/// Sequences as `(tokens, context)`; `tokens` include BOS first and EOS last.
fn batch_of(seqs: &[(Vec<usize>, Option<Vec<f32>>)], steps: usize) -> SequenceBatch {
    let b = seqs.len();
    let mut inputs = vec![vec![0; b]; steps];
    let mut targets = vec![vec![0; b]; steps];
    let mut mask = vec![vec![false; b]; steps];
    for (j, (toks, _)) in seqs.iter().enumerate() {
        for t in 0..toks.len() - 1 {
            inputs[t][j] = toks[t];
            targets[t][j] = toks[t + 1];
            mask[t][j] = true;
        }
    }
    let contexts = seqs[0].1.is_some().then(|| seqs.iter().map(|(_, c)| c.clone()).collect());
    SequenceBatch {
        inputs,
        targets,
        mask,
        contexts,
        image_ids: (0..b).map(|i| format!("img{i}")).collect(),
    }
}

fn arch_strategy() -> impl Strategy<Value = (CellKind, FusionKind)> {
    prop_oneof![
        Just((CellKind::DeltaRnn, FusionKind::None)),
        Just((CellKind::DeltaRnn, FusionKind::Inner)),
        Just((CellKind::DeltaRnn, FusionKind::Outer)),
        Just((CellKind::Gru, FusionKind::None)),
        Just((CellKind::Gru, FusionKind::Outer)),
        Just((CellKind::Lstm, FusionKind::None)),
        Just((CellKind::Lstm, FusionKind::Outer)),
    ]
}

/// Between one and four sentences of 1..6 words, framed with BOS/EOS.
fn sequences(fused: bool) -> impl Strategy<Value = Vec<(Vec<usize>, Option<Vec<f32>>)>> {
    let one = (
        prop::collection::vec(4usize..V, 1..6),
        prop::collection::vec(-1.0f32..1.0, D),
    )
        .prop_map(move |(words, ctx)| {
            let mut toks = vec![2];
            toks.extend(words);
            toks.push(3);
            (toks, fused.then_some(ctx))
        });
    prop::collection::vec(one, 1..5)
}

fn model(arch: CellKind, fusion: FusionKind, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(ModelConfig::new(arch, H, V, fusion).with_context_dim(D), seed).unwrap();
    // Move the one/zero-initialised vectors off their defaults so every term matters.
    let mut rng = mmlm::rng::stream(seed, "test/perturb");
    m.for_each_param_mut(|_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    });
    m
}


// ---- scalar oracle following the published cell equations -----------------

struct P(HashMap<&'static str, Tensor<f64>>);

impl P {
    fn of(m: &Model<f64>) -> Self {
        let mut map = HashMap::new();
        m.for_each_param(|n, t| {
            map.insert(n, t.clone());
        });
        P(map)
    }
    fn has(&self, n: &str) -> bool {
        self.0.contains_key(n)
    }
    fn at(&self, n: &str, r: usize, c: usize) -> f64 {
        self.0[n].get(r, c)
    }
    /// `W e_w`: column `w` of an `H x |V|` matrix.
    fn col(&self, n: &str, w: usize) -> Vec<f64> {
        (0..H).map(|i| self.at(n, i, w)).collect()
    }
    /// `V h` for an `H x H` matrix.
    fn mv(&self, n: &str, h: &[f64]) -> Vec<f64> {
        (0..H).map(|i| (0..H).map(|j| self.at(n, i, j) * h[j]).sum()).collect()
    }
    fn row(&self, n: &str) -> Vec<f64> {
        (0..H).map(|i| self.at(n, 0, i)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Negative log-likelihood of one framed sentence.
fn oracle_nll(m: &Model<f64>, toks: &[usize], ctx: Option<&[f32]>) -> f64 {
    let p = P::of(m);
    let cfg = m.config();
    let dc: Option<Vec<f64>> = ctx.map(|c| {
        (0..H)
            .map(|i| {
                let mc: f64 = (0..D).map(|k| p.at("fusion.m", i, k) * c[k] as f64).sum();
                mc + if p.has("fusion.b_m") { p.at("fusion.b_m", 0, i) } else { 0.0 }
            })
            .collect()
    });
    let mut h = vec![0.0; H];
    let mut cell = vec![0.0; H];
    let mut nll = 0.0;
    for t in 0..toks.len() - 1 {
        let x = toks[t];
        h = match cfg.arch {
            CellKind::DeltaRnn => {
                let d_rec = p.mv("cell.v", &h);
                let d_dat = p.col("cell.w", x);
                let (a, b1, b2, br) = (p.row("cell.alpha"), p.row("cell.beta1"), p.row("cell.beta2"), p.row("cell.b_r"));
                let mut pre: Vec<f64> =
                    (0..H).map(|i| a[i] * d_rec[i] * d_dat[i] + b1[i] * d_rec[i] + b2[i] * d_dat[i]).collect();
                if cfg.fusion == FusionKind::Inner {
                    pre = zip(&pre, dc.as_ref().unwrap(), |u, v| u + v);
                }
                let z: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let r: Vec<f64> = (0..H).map(|i| sigmoid(d_dat[i] + br[i])).collect();
                let mut mix: Vec<f64> = (0..H).map(|i| (1.0 - r[i]) * z[i] + r[i] * h[i]).collect();
                if cfg.fusion == FusionKind::Outer {
                    mix = zip(&mix, dc.as_ref().unwrap(), |u, v| u * v);
                }
                mix.iter().map(|v| v.max(0.0)).collect()
            }
            CellKind::Gru => {
                let z: Vec<f64> = zip(&p.col("cell.w_z", x), &p.mv("cell.v_z", &h), |a, b| sigmoid(a + b));
                let r: Vec<f64> = zip(&p.col("cell.w_r", x), &p.mv("cell.v_r", &h), |a, b| sigmoid(a + b));
                let rh = zip(&r, &h, |a, b| a * b);
                let cand = zip(&p.col("cell.w_h", x), &p.mv("cell.v_h", &rh), |a, b| (a + b).tanh());
                let mut out: Vec<f64> = (0..H).map(|i| z[i] * h[i] + (1.0 - z[i]) * cand[i]).collect();
                if let Some(d) = &dc {
                    out = zip(&out, d, |u, v| u * v);
                }
                out
            }
            CellKind::Lstm => {
                let phi = |v: f64| v.tanh();
                let lin = |w: &str, v: &str| zip(&p.col(w, x), &p.mv(v, &h), |a, b| a + b);
                let z: Vec<f64> = lin("cell.w_z", "cell.v_z").into_iter().map(phi).collect();
                let (ui, uf, ur) = (p.row("cell.u_i"), p.row("cell.u_f"), p.row("cell.u_r"));
                let li = lin("cell.w_i", "cell.v_i");
                let lf = lin("cell.w_f", "cell.v_f");
                let i_g: Vec<f64> = (0..H).map(|k| sigmoid(li[k] + ui[k] * cell[k])).collect();
                let f_g: Vec<f64> = (0..H).map(|k| sigmoid(lf[k] + uf[k] * cell[k])).collect();
                cell = (0..H).map(|k| f_g[k] * cell[k] + i_g[k] * z[k]).collect();
                let lr = lin("cell.w_r", "cell.v_r");
                let r: Vec<f64> = (0..H).map(|k| sigmoid(lr[k] + ur[k] * cell[k])).collect();
                let mut out: Vec<f64> = (0..H).map(|k| r[k] * phi(cell[k])).collect();
                if let Some(d) = &dc {
                    out = zip(&out, d, |u, v| u * v);
                }
                out
            }
        };
        let logits: Vec<f64> = (0..V)
            .map(|w| {
                let s: f64 = (0..H).map(|i| p.at("decoder.u", w, i) * h[i]).sum();
                s + if p.has("decoder.b_u") { p.at("decoder.b_u", 0, w) } else { 0.0 }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        nll += lse - logits[toks[t + 1]];
    }
    nll
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_scalar_oracle((arch, fusion) in arch_strategy(), seed in 0u64..1000, seqs in sequences(true)) {
        let m = model(arch, fusion, seed);
        let fused = fusion != FusionKind::None;
        let seqs: Vec<_> = seqs.into_iter().map(|(t, c)| (t, c.filter(|_| fused))).collect();
        let steps = seqs.iter().map(|s| s.0.len() - 1).max().unwrap();
        let got = m.sequence_nll(&batch_of(&seqs, steps)).unwrap();
        let want: f64 = seqs.iter().map(|(t, c)| oracle_nll(&m, t, c.as_deref())).sum();
        prop_assert!((got.loss - want).abs() <= 1e-10 * want.abs().max(1.0), "{} vs {}", got.loss, want);
        prop_assert_eq!(got.tokens, seqs.iter().map(|s| s.0.len() - 1).sum::<usize>());
    }

    #[test]
    fn batch_loss_is_sum_of_sequence_losses((arch, fusion) in arch_strategy(), seed in 0u64..1000, seqs in sequences(true)) {
        let m = model(arch, fusion, seed);
        let fused = fusion != FusionKind::None;
        let seqs: Vec<_> = seqs.into_iter().map(|(t, c)| (t, c.filter(|_| fused))).collect();
        let steps = seqs.iter().map(|s| s.0.len() - 1).max().unwrap();
        let whole = m.sequence_nll(&batch_of(&seqs, steps)).unwrap();
        let parts: f64 = seqs
            .iter()
            .map(|s| m.sequence_nll(&batch_of(std::slice::from_ref(s), s.0.len() - 1)).unwrap().loss)
            .sum();
        prop_assert!((whole.loss - parts).abs() <= 1e-9, "{} vs {}", whole.loss, parts);
    }

    #[test]
    fn padding_leaves_loss_and_count_unchanged((arch, fusion) in arch_strategy(), seed in 0u64..200, seqs in sequences(true), extra in 1usize..5) {
        let m = model(arch, fusion, seed);
        let fused = fusion != FusionKind::None;
        let seqs: Vec<_> = seqs.into_iter().map(|(t, c)| (t, c.filter(|_| fused))).collect();
        let steps = seqs.iter().map(|s| s.0.len() - 1).max().unwrap();
        let batch = batch_of(&seqs, steps);
        let a = m.sequence_nll(&batch).unwrap();
        let b = m.sequence_nll(&batch.padded_to(steps + extra)).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn step_distributions_sum_to_one((arch, fusion) in arch_strategy(), seed in 0u64..200, seqs in sequences(true)) {
        let m = model(arch, fusion, seed);
        let fused = fusion != FusionKind::None;
        let seqs: Vec<_> = seqs.into_iter().map(|(t, c)| (t, c.filter(|_| fused))).collect();
        let (toks, ctx) = &seqs[0];
        for n in 1..toks.len() {
            let probs = m.predict_next(&toks[..n], ctx.as_deref()).unwrap();
            let total: f64 = probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_rnn_state_is_nonnegative(fusion in prop_oneof![Just(FusionKind::None), Just(FusionKind::Inner), Just(FusionKind::Outer)], seed in 0u64..500, seqs in sequences(true)) {
        let m = model(CellKind::DeltaRnn, fusion, seed);
        let fused = fusion != FusionKind::None;
        let (toks, ctx) = &seqs[0];
        let ctx = ctx.as_deref().filter(|_| fused);
        let proj = m.project_context(ctx).unwrap();
        let mut states = vec![m.initial_state()];
        for &tok in &toks[..toks.len() - 1] {
            let (next, _) = m.decode_step(&states, &[tok], proj.as_ref()).unwrap();
            prop_assert!(next[0].h.iter().all(|&v| v >= 0.0));
            states = next;
        }
    }

    #[test]
    fn null_context_is_the_zero_vector((arch, fusion) in arch_strategy().prop_filter("fused", |(_, f)| *f != FusionKind::None), seed in 0u64..500, seqs in sequences(true)) {
        let m = model(arch, fusion, seed);
        let steps = seqs.iter().map(|s| s.0.len() - 1).max().unwrap();
        let batch = batch_of(&seqs, steps);
        let null = m.sequence_nll(&batch.with_null_contexts()).unwrap();
        let zeros: Vec<_> = seqs.iter().map(|(t, _)| (t.clone(), Some(vec![0.0f32; D]))).collect();
        let zero = m.sequence_nll(&batch_of(&zeros, steps)).unwrap();
        prop_assert_eq!(null.loss.to_bits(), zero.loss.to_bits());
    }

    #[test]
    fn clipped_update_moves_each_component_at_most_lr_times_bound(
        grads in prop::collection::vec(-50.0f64..50.0, 1..30),
        lr in 0.01f64..2.0,
        bound in 0.1f64..5.0,
    ) {
        let n = grads.len();
        let start = Tensor::row_vector((0..n).map(|i| i as f64 * 0.1).collect());
        let mut params = vec![start.clone()];
        let mut g = vec![Tensor::row_vector(grads)];
        sgd_step(&mut params, &mut g, lr, Some(bound)).unwrap();
        for (a, b) in params[0].data().iter().zip(start.data()) {
            prop_assert!((a - b).abs() <= lr * bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn learning_rate_after_n_halvings_is_exact(n in 0u32..20) {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(&cfg);
        let mut ppl = 10.0;
        s.update_schedule(ppl, &cfg);
        while s.halvings < n {
            ppl += 1.0;
            s.update_schedule(ppl, &cfg);
        }
        prop_assert_eq!(s.lr, cfg.learning_rate * 2f64.powi(-(n as i32)));
    }

    #[test]
    fn neighbor_cosines_are_bounded_and_duplicates_score_one(seed in 0u64..500, scale in 0.1f64..10.0) {
        let words: Vec<String> = (0..V - 4).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::build([words.as_slice()], 1).unwrap();
        let mut m = model(CellKind::Gru, FusionKind::None, seed);
        // Row of w1 becomes a positive multiple of the row of w0.
        let (q, d) = (vocab.id("w0").unwrap(), vocab.id("w1").unwrap());
        for c in 0..H {
            let v = m.decoder.u.get(q, c) * scale;
            m.decoder.u.set(d, c, v);
        }
        let r = nearest_neighbors(&m.decoder, "w0", &vocab, V).unwrap();
        prop_assert!(r.neighbors.iter().all(|(_, c)| (-1.0..=1.0).contains(c)));
        prop_assert_eq!(r.neighbors[0].0.as_str(), "w1");
        prop_assert!((r.neighbors[0].1 - 1.0).abs() < 1e-9);
    }
}

#[test]
fn evaluation_is_pure_and_lv_l_equals_lv_lv_on_zero_contexts() {
    let words: Vec<String> = (0..V - 4).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build([words.as_slice()], 1).unwrap();
    let records: Vec<_> = (0..9)
        .map(|i| {
            let text: Vec<&str> = (0..1 + i % 5).map(|k| words[(i * 3 + k) % words.len()].as_str()).collect();
            mmlm::data::CaptionRecord::new(&format!("img{i}"), "toy", mmlm::data::Split::Test, &text.join(" ")).unwrap()
        })
        .collect();
    let mut zeros = ContextStore::new(D);
    for r in &records {
        zeros.insert(&r.image_id, vec![0.0; D]).unwrap();
    }
    for (arch, fusion) in [(CellKind::DeltaRnn, FusionKind::Inner), (CellKind::Gru, FusionKind::Outer), (CellKind::Lstm, FusionKind::Outer)] {
        let m = model(arch, fusion, 3);
        let before = m.clone();
        let data = mmlm::train::Dataset { records: &records, vocab: &vocab, contexts: Some(&zeros) };
        let run = |c| evaluate(&m, data.batches(8, 4, None).unwrap(), c).unwrap();
        let (a, b) = (run(Condition::LvLv), run(Condition::LvLv));
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
        assert_eq!(m, before);
        let lvl = batches_nll(&m, data.batches(8, 4, None).unwrap(), Condition::LvL).unwrap();
        let lvlv = batches_nll(&m, data.batches(8, 4, None).unwrap(), Condition::LvLv).unwrap();
        assert_eq!(lvl.loss.to_bits(), lvlv.loss.to_bits());
    }
}
