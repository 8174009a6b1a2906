use super::*;
use crate::gradcheck::gradcheck;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C: usize = 5;
const N: usize = 9;

fn config(mode: InitMode) -> SlotConfig {
    SlotConfig {
        num_slots: 3,
        slot_dim: 6,
        proj_dim: 4,
        iterations: 3,
        init_mode: mode,
    }
}

fn build(mode: InitMode, seed: u64) -> (ParamStore<f64>, SlotAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sa = SlotAttention::new(&mut store, &mut rng, config(mode), C).unwrap();
    // Perturb the norm parameters so they matter in the reference comparison.
    for (i, v) in store.values_mut().iter_mut().enumerate() {
        *v = v.map(|x| x + 0.01 * (i as f64 % 3.0 - 1.0));
    }
    (store, sa)
}

fn features(seed: u64, batch: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, N, C], |_| rng.random_range(-1.0..1.0))
}

// Plain nested-vector reference of vanilla slot attention.
mod reference {
    pub type M = Vec<Vec<f64>>;

    pub fn mat(t: &crate::Tensor<f64>, rows: usize) -> M {
        t.data().chunks(t.len() / rows).map(|r| r.to_vec()).collect()
    }

    pub fn vec(t: &crate::Tensor<f64>) -> Vec<f64> {
        t.data().to_vec()
    }

    pub fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn add_row(a: &M, b: &[f64]) -> M {
        a.iter()
            .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn layer_norm(a: &M, gain: &[f64], bias: &[f64]) -> M {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
                    .collect()
            })
            .collect()
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }
}

struct RefParams<'a>(&'a ParamStore<f64>);

impl RefParams<'_> {
    fn t(&self, name: &str) -> &Tensor<f64> {
        self.0.get(self.0.find(name).unwrap_or_else(|| panic!("{name}")))
    }
    fn m(&self, name: &str) -> reference::M {
        let t = self.t(name);
        reference::mat(t, t.shape()[0])
    }
    fn v(&self, name: &str) -> Vec<f64> {
        reference::vec(self.t(name))
    }
}

fn reference_run(
    store: &ParamStore<f64>,
    cfg: SlotConfig,
    feats: &reference::M,
    init: &reference::M,
) -> (reference::M, reference::M) {
    use reference::*;
    let p = RefParams(store);
    let z = layer_norm(feats, &p.v("slots.norm_inputs.gain"), &p.v("slots.norm_inputs.bias"));
    let keys = matmul(&z, &p.m("slots.k.w"));
    let values = matmul(&z, &p.m("slots.v.w"));
    let mut slots = init.clone();
    let mut attn = vec![];
    let k = cfg.num_slots;
    for _ in 0..cfg.iterations {
        let s = layer_norm(&slots, &p.v("slots.norm_slots.gain"), &p.v("slots.norm_slots.bias"));
        let q = matmul(&s, &p.m("slots.q.w"));
        let scale = 1.0 / (cfg.proj_dim as f64).sqrt();
        let logits: M = (0..k)
            .map(|i| {
                keys.iter()
                    .map(|kr| q[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect()
            })
            .collect();
        attn = vec![vec![0.0; N]; k];
        for n in 0..N {
            let mx = (0..k).map(|i| logits[i][n]).fold(f64::MIN, f64::max);
            let den: f64 = (0..k).map(|i| (logits[i][n] - mx).exp()).sum();
            for i in 0..k {
                attn[i][n] = (logits[i][n] - mx).exp() / den;
            }
        }
        let renorm: M = attn
            .iter()
            .map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-8;
                r.iter().map(|x| x / s).collect()
            })
            .collect();
        let updates = matmul(&renorm, &values);
        let gate = |wi: &str, wh: &str, b: &str| -> M {
            let a = matmul(&updates, &p.m(wi));
            let h = matmul(&slots, &p.m(wh));
            a.iter()
                .zip(&h)
                .map(|(ar, hr)| {
                    ar.iter()
                        .zip(hr)
                        .zip(p.v(b))
                        .map(|((x, y), bb)| sigmoid(x + y + bb))
                        .collect()
                })
                .collect()
        };
        let r = gate("slots.gru.w_ir", "slots.gru.w_hr", "slots.gru.b_r");
        let zg = gate("slots.gru.w_iz", "slots.gru.w_hz", "slots.gru.b_z");
        let xn = add_row(&matmul(&updates, &p.m("slots.gru.w_in")), &p.v("slots.gru.b_in"));
        let hn = add_row(&matmul(&slots, &p.m("slots.gru.w_hn")), &p.v("slots.gru.b_hn"));
        let next: M = (0..k)
            .map(|i| {
                (0..cfg.slot_dim)
                    .map(|j| {
                        let n = (xn[i][j] + r[i][j] * hn[i][j]).tanh();
                        (1.0 - zg[i][j]) * slots[i][j] + zg[i][j] * n
                    })
                    .collect()
            })
            .collect();
        let normed = layer_norm(&next, &p.v("slots.norm_mlp.gain"), &p.v("slots.norm_mlp.bias"));
        let h = add_row(&matmul(&normed, &p.m("slots.mlp.0.w")), &p.v("slots.mlp.0.b"));
        let h: M = h.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect();
        let out = add_row(&matmul(&h, &p.m("slots.mlp.1.w")), &p.v("slots.mlp.1.b"));
        slots = next
            .iter()
            .zip(&out)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
    }
    (slots, attn)
}

fn max_diff(a: &[f64], b: &reference::M) -> f64 {
    a.iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    assert!(config(InitMode::Gaussian).validate().is_ok());
    for bad in [
        SlotConfig {
            num_slots: 1,
            ..config(InitMode::Gaussian)
        },
        SlotConfig {
            iterations: 0,
            ..config(InitMode::Gaussian)
        },
        SlotConfig {
            proj_dim: 0,
            ..config(InitMode::Gaussian)
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Contract(_))));
    }
}

#[test]
fn null_hook_matches_reference_implementation() {
    for mode in [InitMode::Gaussian, InitMode::LearnedQuery] {
        let (store, sa) = build(mode, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = sa.sample_noise::<f64>(&mut rng, 2);
        let feats = features(4, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(feats.clone());
        let out = sa.run(&mut g, &p, f, Some(&noise), &mut NullHook).unwrap();
        let init = sa.init_slots(&mut g, &p, 2, Some(&noise)).unwrap();
        for b in 0..2 {
            let fm = reference::mat(&feats.index_axis0(b), N);
            let im = reference::mat(&g.value(init).index_axis0(b), 3);
            let (slots, attn) = reference_run(&store, sa.config, &fm, &im);
            let batch = SlotBatch::from_graph(&g, &out, b);
            assert!(max_diff(batch.slots.data(), &slots) <= 1e-10, "{mode:?}");
            assert!(max_diff(batch.attention.data(), &attn) <= 1e-10, "{mode:?}");
        }
    }
}

#[test]
fn zero_bias_hook_is_bitwise_vanilla() {
    struct ZeroHook;
    impl SlotHook<f64> for ZeroHook {
        fn bias(&mut self, g: &mut Graph<f64>, _: &Bound, l: Var, _: usize) -> Result<Option<Var>> {
            Ok(Some(g.constant(Tensor::zeros(g.shape(l)))))
        }
    }
    let (store, sa) = build(InitMode::Gaussian, 5);
    let noise = sa.sample_noise::<f64>(&mut ChaCha8Rng::seed_from_u64(1), 2);
    let run = |hook: &mut dyn SlotHook<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features(2, 2));
        let out = sa.run(&mut g, &p, f, Some(&noise), hook).unwrap();
        g.value(out.slots).clone()
    };
    assert_eq!(run(&mut NullHook), run(&mut ZeroHook));
}

#[test]
fn attention_is_simplex_over_slots_and_renorm_over_positions() {
    let (store, sa) = build(InitMode::Gaussian, 8);
    let noise = sa.sample_noise::<f64>(&mut ChaCha8Rng::seed_from_u64(2), 2);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f = g.constant(features(6, 2));
    let out = sa.run(&mut g, &p, f, Some(&noise), &mut NullHook).unwrap();
    for b in 0..2 {
        let s = SlotBatch::from_graph(&g, &out, b);
        for n in 0..N {
            let col: f64 = (0..3).map(|k| s.attention.at(&[k, n])).sum();
            assert!((col - 1.0).abs() <= 1e-6);
        }
        for k in 0..3 {
            let row: f64 = s.attention_renorm.row(k).iter().sum();
            assert!((row - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn attend_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_f64(&[1, 2, 2], &[3f64.ln(), 0.0, 0.0, 0.0]).unwrap());
    let values = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 3.0]).unwrap());
    let (a, _, _) = SlotAttention::attend(&mut g, logits, None, values).unwrap();
    assert!((g.value(a).at(&[0, 0, 0]) - 0.75).abs() < 1e-12);
    assert!((g.value(a).at(&[0, 1, 0]) - 0.25).abs() < 1e-12);

    // A single slot takes everything; renormalized weights are uniform.
    let one = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.4, -2.0]).unwrap());
    let (a, r, u) = SlotAttention::attend(&mut g, one, None, values).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, 1.0]);
    assert!(g.value(r).data().iter().all(|x| (x - 0.5).abs() < 1e-8));
    assert!((g.value(u).item() - 2.0).abs() < 1e-7);

    let bad = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(SlotAttention::attend(&mut g, logits, Some(bad), values).is_err());
}

#[test]
fn position_constant_logit_shift_leaves_attention_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let l = Tensor::<f64>::from_fn(&[1, 3, 4], |_| rng.random_range(-2.0..2.0));
    let shift = [0.5, -3.0, 7.0, 0.0];
    let shifted = Tensor::from_fn(&[1, 3, 4], |i| l.data()[i] + shift[i % 4]);
    let mut g = Graph::new();
    let v = g.constant(Tensor::ones(&[1, 4, 2]));
    let (l1, l2) = (g.constant(l), g.constant(shifted));
    let (a1, _, _) = SlotAttention::attend(&mut g, l1, None, v).unwrap();
    let (a2, _, _) = SlotAttention::attend(&mut g, l2, None, v).unwrap();
    let diff = g
        .value(a1)
        .data()
        .iter()
        .zip(g.value(a2).data())
        .map(|(x, y)| (x - y).abs());
    assert!(diff.fold(0.0, f64::max) < 1e-12);
}

#[test]
fn logits_hand_example() {
    // q row [1,0,0,0] against key row [2,0,0,0] with d = 4 gives 2 / 2.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SlotConfig {
        num_slots: 2,
        slot_dim: 4,
        proj_dim: 4,
        ..config(InitMode::Gaussian)
    };
    let sa = SlotAttention::new(&mut store, &mut rng, cfg, 4).unwrap();
    *store.get_mut(sa.project_q.w) = Tensor::eye(4);
    *store.get_mut(sa.project_k.w) = Tensor::eye(4).map(|x| 2.0 * x);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let s = g.constant(Tensor::from_f64(&[1, 2, 4], &[1., 0., 0., 0., 0., 0., 0., 0.]).unwrap());
    let f = g.constant(Tensor::from_f64(&[1, 1, 4], &[1., 0., 0., 0.]).unwrap());
    let l = sa.attention_logits(&mut g, &p, s, f).unwrap();
    assert_eq!(g.value(l).data(), &[1.0, 0.0]);
}

#[test]
fn gaussian_init_collapses_to_mean_without_spread() {
    let (mut store, sa) = build(InitMode::Gaussian, 1);
    let SlotInit::Gaussian { mu, log_sigma } = sa.init else {
        unreachable!()
    };
    *store.get_mut(log_sigma) = Tensor::full(&[6], -800.0);
    let noise = sa.sample_noise::<f64>(&mut ChaCha8Rng::seed_from_u64(3), 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let s = sa.init_slots(&mut g, &p, 1, Some(&noise)).unwrap();
    for k in 0..3 {
        assert_eq!(g.value(s).index_axis0(0).row(k), store.get(mu).data());
    }
    assert!(sa.init_slots(&mut g, &p, 1, None).is_err());
}

#[test]
fn learned_queries_receive_gradient_and_are_deterministic() {
    let (store, sa) = build(InitMode::LearnedQuery, 2);
    let SlotInit::LearnedQuery { queries } = sa.init else {
        unreachable!()
    };
    let run = || {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features(1, 1));
        let out = sa.run(&mut g, &p, f, None, &mut NullHook).unwrap();
        let sq = g.square(out.slots);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        (g.value(out.slots).clone(), store.grads(&g, &p)[queries.index()].clone())
    };
    let (s1, g1) = run();
    let (s2, _) = run();
    assert_eq!(s1, s2);
    assert!(g1.max_abs() > 0.0);
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    // Permutes axis 1 of a [B, K, ...] tensor, or axis 0 of a [K, ...] tensor.
    let (b, k) = if t.rank() == 2 {
        (1, t.shape()[0])
    } else {
        (t.shape()[0], t.shape()[1])
    };
    let inner = t.len() / (b * k);
    let mut data = Vec::with_capacity(t.len());
    for bi in 0..b {
        for &src in perm {
            let start = (bi * k + src) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    Tensor::new(t.shape(), data).unwrap()
}

#[test]
fn gaussian_mode_permutation_equivariance() {
    let (store, sa) = build(InitMode::Gaussian, 12);
    let noise = sa.sample_noise::<f64>(&mut ChaCha8Rng::seed_from_u64(5), 2);
    let perm = [2, 0, 1];
    let run = |noise: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features(3, 2));
        let out = sa.run(&mut g, &p, f, Some(noise), &mut NullHook).unwrap();
        (g.value(out.slots).clone(), g.value(out.attention).clone())
    };
    let (s, a) = run(&noise);
    let (sp, ap) = run(&permute_rows(&noise, &perm));
    let close = |x: &Tensor<f64>, y: &Tensor<f64>| x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-12);
    assert!(close(&permute_rows(&s, &perm), &sp));
    assert!(close(&permute_rows(&a, &perm), &ap));
}

#[test]
fn learned_query_with_prior_permutation_equivariance() {
    let (mut store, sa) = build(InitMode::LearnedQuery, 13);
    let SlotInit::LearnedQuery { queries } = sa.init else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let alpha0 = store.add("alpha0", Tensor::from_fn(&[3, N], |_| rng.random_range(-1.0..1.0)));
    let grid = PositionGrid::new(3, 3).unwrap();
    let perm = [1, 2, 0];
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features(7, 2));
        let cfg = CspConfig {
            t_spat: 3,
            trace: true,
            ..CspConfig::default()
        };
        let mut hook = SpatialPrior::new(alpha0, &grid, cfg);
        let out = sa.run(&mut g, &p, f, None, &mut hook).unwrap();
        let stats = hook.states[2][1].final_stats.clone().unwrap();
        (g.value(out.slots).clone(), g.value(out.alpha.unwrap()).clone(), stats)
    };
    let (s, a, st) = run(&store);
    let mut permuted = store.clone();
    *permuted.get_mut(queries) = permute_rows(store.get(queries), &perm);
    *permuted.get_mut(alpha0) = permute_rows(store.get(alpha0), &perm);
    let (sp, ap, stp) = run(&permuted);
    let close = |x: &Tensor<f64>, y: &Tensor<f64>| x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-10);
    assert!(close(&permute_rows(&s, &perm), &sp));
    assert!(close(&permute_rows(&a, &perm), &ap));
    for (i, &src) in perm.iter().enumerate() {
        assert!((st.means[src][0] - stp.means[i][0]).abs() < 1e-10);
        assert!((st.variances[src] - stp.variances[i]).abs() < 1e-10);
    }
}

#[test]
fn prior_with_zero_init_and_no_steps_is_bitwise_vanilla() {
    let (mut store, sa) = build(InitMode::Gaussian, 14);
    let alpha0 = store.add("alpha0", Tensor::zeros(&[3, N]));
    let grid = PositionGrid::new(3, 3).unwrap();
    let noise = sa.sample_noise::<f64>(&mut ChaCha8Rng::seed_from_u64(4), 2);
    let run = |hook: &mut dyn SlotHook<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(features(8, 2));
        let out = sa.run(&mut g, &p, f, Some(&noise), hook).unwrap();
        let sq = g.square(out.slots);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        (g.value(out.slots).clone(), store.grads(&g, &p))
    };
    let cfg = CspConfig {
        t_spat: 0,
        ..CspConfig::default()
    };
    let (s1, g1) = run(&mut NullHook);
    let (s2, g2) = run(&mut SpatialPrior::new(alpha0, &grid, cfg));
    assert_eq!(s1, s2);
    assert_eq!(g1, g2);
}

#[test]
fn slot_update_rows_are_independent() {
    let (store, sa) = build(InitMode::Gaussian, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = Tensor::<f64>::from_fn(&[1, 3, 6], |_| rng.random_range(-1.0..1.0));
    let u = Tensor::<f64>::from_fn(&[1, 3, 4], |_| rng.random_range(-1.0..1.0));
    let perm = [2, 1, 0];
    let eval = |s: Tensor<f64>, u: Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (s, u) = (g.constant(s), g.constant(u));
        let out = sa.slot_update(&mut g, &p, s, u).unwrap();
        g.value(out).clone()
    };
    let out = eval(s.clone(), u.clone());
    let outp = eval(permute_rows(&s, &perm), permute_rows(&u, &perm));
    assert_eq!(permute_rows(&out, &perm), outp);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (sv, bad) = (g.constant(s), g.constant(Tensor::zeros(&[1, 2, 4])));
    assert!(sa.slot_update(&mut g, &p, sv, bad).is_err());
}

#[test]
fn slot_update_with_zero_mlp_is_pure_gru() {
    let (mut store, sa) = build(InitMode::Gaussian, 16);
    for id in [sa.mlp.out.w, sa.mlp.out.b.unwrap()] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = Tensor::<f64>::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0));
    let u = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (sv, uv) = (g.constant(s), g.constant(u));
    let out = sa.slot_update(&mut g, &p, sv, uv).unwrap();
    let gru = sa.gru.forward(&mut g, &p, sv, uv).unwrap();
    assert_eq!(g.value(out), g.value(gru));
}

#[test]
fn slot_update_gradient_matches_finite_differences() {
    let (store, sa) = build(InitMode::Gaussian, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = Tensor::<f64>::from_fn(&[2, 6], |_| rng.random_range(-1.0..1.0));
    let u = Tensor::<f64>::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[2, 6], |_| rng.random_range(-1.0..1.0));
    let report = gradcheck(&[s, u], 1e-5, |g, v| {
        let p = store.bind_frozen(g);
        let out = sa.slot_update(g, &p, v[0], v[1])?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        Ok(g.sum(prod))
    })
    .unwrap();
    assert!(report.passes(1e-4, 1e-8), "{}", report.worst_relative(1e-8));
}
