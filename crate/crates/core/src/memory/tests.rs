use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(c: usize, p: usize, cap: usize) -> MemoryConfig {
    MemoryConfig {
        feature_dim: c,
        tokens_per_view: p,
        capacity_tokens: cap,
        directional: true,
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

fn random_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenBlock {
    TokenBlock::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_bank(rng: &mut ChaCha8Rng, c: usize, p: usize, views: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(cfg(c, p, p * views)).unwrap();
    for t in 0..views {
        let k = random_block(rng, p, c);
        let v = random_block(rng, p, c);
        bank.write(&k, &random_unit(rng), &v, t as u64).unwrap();
    }
    bank
}

// Scalar-loop oracle for one read mode.
fn oracle_read(bank: &MemoryBank, q: &TokenBlock, qd: Vec3, tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut outs = Vec::new();
    let mut attns = Vec::new();
    for p in 0..q.rows() {
        let mut s = Vec::new();
        for tok in bank.tokens() {
            let mut dot = 0.0;
            for c in 0..q.cols() {
                dot += q.get(p, c) * tok.latent_key[c] as f64;
            }
            let dd = qd[0] * tok.direction_key[0] + qd[1] * tok.direction_key[1] + qd[2] * tok.direction_key[2];
            s.push(dot * dd * (1.0 / tau));
        }
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let a: Vec<f64> = s.iter().map(|v| v.exp() / z).collect();
        let mut out = vec![0.0; q.cols()];
        for (i, tok) in bank.tokens().iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(tok.value.iter()) {
                *o += a[i] * v as f64;
            }
        }
        outs.push(out);
        attns.push(a);
    }
    (outs, attns)
}

#[test]
fn angles_to_direction() {
    let pole = direction_key_from_angles(1.234, 0.0).unwrap();
    assert!((pole - Vec3::z()).norm() < 1e-15);
    let x = direction_key_from_angles(0.0, std::f64::consts::FRAC_PI_2).unwrap();
    assert!((x - Vec3::x()).norm() < 1e-15);
    let y = direction_key_from_angles(std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2).unwrap();
    assert!((y - Vec3::y()).norm() < 1e-15);
    assert!(direction_key_from_angles(f64::NAN, 0.0).is_err());
    assert!(direction_key_from_angles(0.0, f64::INFINITY).is_err());
}

#[test]
fn direction_query_cases() {
    let z = Vec3::z();
    assert_eq!(direction_query(&z, &z).unwrap(), z);
    let q = direction_query(&Vec3::x(), &Vec3::y()).unwrap();
    assert!((q - Vec3::new(std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0)).norm() < 1e-8);
    assert_eq!(direction_query(&Vec3::x(), &-Vec3::x()).unwrap(), Vec3::x());
    assert!(direction_query(&Vec3::new(2.0, 0.0, 0.0), &Vec3::x()).is_err());
}

#[test]
fn temperature_endpoints() {
    assert_eq!(temperature(1.0), 1.5);
    assert_eq!(temperature(0.0), 2.5);
    assert_eq!(temperature(0.5), 2.0);
    assert_eq!(temperature(7.0), 1.5);
    assert_eq!(temperature(-1.0), 2.5);
}

fn one_token_bank(latent: Vec<f64>, dir: Vec3, value: Vec<f64>) -> MemoryBank {
    let c = latent.len();
    let mut bank = MemoryBank::new(cfg(c, 1, 8)).unwrap();
    bank.write(&TokenBlock::from_vec(1, c, latent).unwrap(), &dir, &TokenBlock::from_vec(1, c, value).unwrap(), 0)
        .unwrap();
    bank
}

#[test]
fn aligned_score_examples() {
    let bank = one_token_bank(vec![1.0, 0.0], Vec3::z(), vec![0.0, 0.0]);
    let q = TokenBlock::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(bank.aligned_scores(&q, &Vec3::z(), 2.0).unwrap().get(0, 0), 0.5);
    assert_eq!(bank.aligned_scores(&q, &Vec3::x(), 2.0).unwrap().get(0, 0), 0.0);
    assert_eq!(bank.complementary_scores(&q, &Vec3::z(), 2.0).unwrap().get(0, 0), -0.5);
    assert_eq!(bank.complementary_scores(&q, &-Vec3::z(), 1.0).unwrap().get(0, 0), 1.0);
}

#[test]
fn scores_on_empty_bank_fail() {
    let bank = MemoryBank::new(cfg(2, 1, 4)).unwrap();
    let q = TokenBlock::zeros(1, 2);
    assert!(matches!(bank.aligned_scores(&q, &Vec3::z(), 1.0), Err(Error::EmptyBank)));
    let mut bank = bank;
    assert!(matches!(bank.read(&q, &Vec3::z(), &Vec3::z(), 1.0), Err(Error::EmptyBank)));
}

#[test]
fn scores_match_scalar_loop_on_small_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bank = random_bank(&mut rng, 5, 1, 4);
    let q = random_block(&mut rng, 3, 5);
    let qd = random_unit(&mut rng);
    let s = bank.aligned_scores(&q, &qd, 1.7).unwrap();
    for p in 0..3 {
        for (i, tok) in bank.tokens().iter().enumerate() {
            let lat: f64 = (0..5).map(|c| q.get(p, c) * tok.latent_key[c] as f64).sum();
            let want = lat * qd.dot(&tok.direction_key) / 1.7;
            assert!((s.get(p, i) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn single_token_readout_is_its_value() {
    let mut bank = one_token_bank(vec![0.3, -0.2, 0.9], Vec3::y(), vec![0.25, 0.5, -1.0]);
    let q = TokenBlock::from_vec(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.0, 1.0]).unwrap();
    let r = bank.read(&q, &Vec3::z(), &Vec3::x(), 0.3).unwrap();
    let value: Vec<f64> = bank.tokens()[0].value.iter().map(|&v| v as f64).collect();
    for p in 0..2 {
        assert_eq!(r.aligned.row(p), value.as_slice());
        assert_eq!(r.complementary.row(p), value.as_slice());
    }
}

#[test]
fn identical_tokens_split_attention() {
    let mut bank = MemoryBank::new(cfg(2, 2, 8)).unwrap();
    let k = TokenBlock::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let v = TokenBlock::from_vec(2, 2, vec![1.0, -2.0, 1.0, -2.0]).unwrap();
    bank.write(&k, &Vec3::x(), &v, 0).unwrap();
    let q = TokenBlock::from_vec(1, 2, vec![0.7, 0.1]).unwrap();
    let r = bank.read(&q, &Vec3::x(), &Vec3::y(), 0.5).unwrap();
    assert_eq!(r.attention_aligned.row(0), &[0.5, 0.5]);
    assert_eq!(r.aligned.row(0), &[1.0, -2.0]);
}

#[test]
fn readout_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bank = random_bank(&mut rng, 6, 2, 4);
    let q = random_block(&mut rng, 2, 6);
    let (k0, kt) = (random_unit(&mut rng), random_unit(&mut rng));
    let r = bank.compute_readout(&q, &k0, &kt, 0.8).unwrap();
    let qd = direction_query(&k0, &kt).unwrap();
    let tau = temperature(0.8);
    let (want_a, attn_a) = oracle_read(&bank, &q, qd, tau);
    let (want_c, attn_c) = oracle_read(&bank, &q, -qd, tau);
    for p in 0..2 {
        for c in 0..6 {
            assert!((r.aligned.get(p, c) - want_a[p][c]).abs() < 1e-10);
            assert!((r.complementary.get(p, c) - want_c[p][c]).abs() < 1e-10);
        }
        for i in 0..bank.len() {
            assert!((r.attention_aligned.get(p, i) - attn_a[p][i]).abs() < 1e-12);
            assert!((r.attention_comp.get(p, i) - attn_c[p][i]).abs() < 1e-12);
        }
    }
}

#[test]
fn write_reports_shared_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bank = MemoryBank::new(cfg(4, 8, 64)).unwrap();
    let d = random_unit(&mut rng);
    bank.write(&random_block(&mut rng, 8, 4), &d, &random_block(&mut rng, 8, 4), 3).unwrap();
    assert_eq!(bank.len(), 8);
    assert!(bank.tokens().iter().all(|t| t.direction_key == bank.tokens()[0].direction_key && t.birth_t == 3));
    assert!((bank.tokens()[0].direction_key - d).norm() < 1e-15);
}

#[test]
fn write_rejects_wrong_shape() {
    let mut bank = MemoryBank::new(cfg(4, 8, 64)).unwrap();
    let err = bank.write(&TokenBlock::zeros(7, 4), &Vec3::z(), &TokenBlock::zeros(8, 4), 0);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
    let err = bank.write(&TokenBlock::zeros(8, 4), &Vec3::z(), &TokenBlock::zeros(8, 3), 0);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn write_at_capacity_sparsifies_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut bank = random_bank(&mut rng, 4, 10, 10);
    assert_eq!(bank.len(), 100);
    let removed = bank.write(&random_block(&mut rng, 10, 4), &random_unit(&mut rng), &random_block(&mut rng, 10, 4), 10)
        .unwrap();
    assert_eq!(removed.len(), 20);
    assert_eq!(bank.len(), 100 - 20 + 10);
}

#[test]
fn usage_examples() {
    let mut tok = MemoryToken {
        id: 0,
        latent_key: vec![],
        direction_key: Vec3::z(),
        value: vec![],
        usage_sum: 0.0,
        read_count: 0,
        birth_t: 0,
    };
    assert_eq!(usage(&tok), 0.0);
    tok.usage_sum = 0.5 + 0.25;
    tok.read_count = 1;
    assert_eq!(usage(&tok), 0.75);
    tok.usage_sum = 0.2 + 0.4;
    tok.read_count = 2;
    assert!((usage(&tok) - 0.3).abs() < 1e-15);
}

#[test]
fn usage_accumulates_mean_attention_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bank = random_bank(&mut rng, 3, 2, 3);
    let q = random_block(&mut rng, 4, 3);
    let r = bank.read(&q, &Vec3::z(), &Vec3::x(), 0.5).unwrap();
    for (i, tok) in bank.tokens().iter().enumerate() {
        let mut m = 0.0;
        for p in 0..4 {
            m += r.attention_aligned.get(p, i) + r.attention_comp.get(p, i);
        }
        assert!((tok.usage_sum - m / 4.0).abs() < 1e-15);
        assert_eq!(tok.read_count, 1);
    }
    // total mass per read is 2 (two reads, each row a distribution)
    let total: f64 = bank.tokens().iter().map(|t| t.usage_sum).sum();
    assert!((total - 2.0).abs() < 1e-12);
}

fn bank_with_dirs(dirs: &[Vec3]) -> MemoryBank {
    let mut bank = MemoryBank::new(cfg(1, 1, dirs.len().max(1))).unwrap();
    for (t, d) in dirs.iter().enumerate() {
        bank.write(&TokenBlock::zeros(1, 1), d, &TokenBlock::zeros(1, 1), t as u64).unwrap();
    }
    bank
}

#[test]
fn coverage_examples() {
    let bank = bank_with_dirs(&[Vec3::x(), Vec3::y(), Vec3::z()]);
    for i in 0..3 {
        assert_eq!(bank.coverage(i).unwrap(), 0.0);
    }
    let bank = bank_with_dirs(&[Vec3::x(), -Vec3::x()]);
    assert_eq!(bank.coverage(0).unwrap(), -1.0);
    assert_eq!(bank.coverage(1).unwrap(), -1.0);
    let bank = bank_with_dirs(&[Vec3::x()]);
    assert!(matches!(bank.coverage(0), Err(Error::UndefinedCoverage)));
}

#[test]
fn coverage_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let dirs: Vec<_> = (0..16).map(|_| random_unit(&mut rng)).collect();
    let bank = bank_with_dirs(&dirs);
    for i in 0..16 {
        let mut s = 0.0;
        for j in 0..16 {
            if j != i {
                s += dirs[i].dot(&dirs[j]);
            }
        }
        assert!((bank.coverage(i).unwrap() - s / 15.0).abs() < 1e-12);
    }
}

fn set_usage(bank: &mut MemoryBank, usages: &[f64]) {
    for (t, &u) in bank.tokens.iter_mut().zip(usages) {
        t.usage_sum = u;
        t.read_count = 1;
    }
}

#[test]
fn sparsify_removes_exactly_a_fifth() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut bank = random_bank(&mut rng, 2, 10, 10);
    let report = bank.sparsify();
    assert_eq!(report.removed_ids.len(), 20);
    assert_eq!(bank.len(), 80);
    assert!(report.removed_ids.iter().all(|id| report.dense_ids.contains(id)));
}

#[test]
fn sparsify_identical_keys_drops_lowest_usage() {
    let mut bank = bank_with_dirs(&vec![Vec3::z(); 100]);
    // distinct usages in a scrambled order
    let usages: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
    set_usage(&mut bank, &usages);
    let mut expect: Vec<u64> = (0..100u64).collect();
    expect.sort_by(|&a, &b| usages[a as usize].total_cmp(&usages[b as usize]));
    expect.truncate(20);
    let mut removed = bank.sparsify().removed_ids;
    removed.sort_by(|&a, &b| usages[a as usize].total_cmp(&usages[b as usize]));
    assert_eq!(removed, expect);
}

#[test]
fn sparsify_prunes_inside_the_cluster() {
    // 40 tokens in a tight cone around +z, 10 scattered outliers
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut dirs = Vec::new();
    for _ in 0..40 {
        let jitter = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0);
        dirs.push((Vec3::z() + jitter).normalize());
    }
    let outliers: Vec<Vec3> = (0..10)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / 10.0;
            Vec3::new(a.cos(), a.sin(), -0.8).normalize()
        })
        .collect();
    dirs.extend(&outliers);
    let mut bank = bank_with_dirs(&dirs);
    let usages: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
    set_usage(&mut bank, &usages);

    // brute force: coverage by double loop, dense = top 25, threshold by nearest rank
    let cov: Vec<f64> = (0..50)
        .map(|i| (0..50).filter(|&j| j != i).map(|j| dirs[i].dot(&dirs[j])).sum::<f64>() / 49.0)
        .collect();
    let mut order: Vec<usize> = (0..50).collect();
    order.sort_by(|&a, &b| cov[b].partial_cmp(&cov[a]).unwrap());
    let dense: Vec<usize> = order[..25].to_vec();
    assert!(dense.iter().all(|&i| i < 40), "dense subset should be the cluster");
    let mut du: Vec<f64> = dense.iter().map(|&i| usages[i]).collect();
    du.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let uq = du[(0.4f64 * 25.0).ceil() as usize - 1];
    let mut prune: Vec<usize> = dense.iter().copied().filter(|&i| usages[i] <= uq).collect();
    prune.sort_by(|&a, &b| usages[a].partial_cmp(&usages[b]).unwrap());
    prune.truncate(10);
    let mut expect: Vec<u64> = prune.iter().map(|&i| i as u64).collect();
    expect.sort();

    let mut removed = bank.sparsify().removed_ids;
    removed.sort();
    assert_eq!(removed, expect);
    assert!(removed.iter().all(|&id| id < 40));
}

#[test]
fn nearest_rank_definition() {
    assert_eq!(nearest_rank(40.0, 25), 10);
    assert_eq!(nearest_rank(40.0, 50), 20);
    assert_eq!(nearest_rank(40.0, 1), 1);
    assert_eq!(nearest_rank(40.0, 3), 2);
}

#[test]
fn snapshot_round_trip_replays_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut bank = random_bank(&mut rng, 4, 4, 3);
    let q = random_block(&mut rng, 4, 4);
    bank.read(&q, &Vec3::z(), &Vec3::x(), 0.4).unwrap();
    let mut bytes = Vec::new();
    snapshot(&bank, &mut bytes).unwrap();
    let mut restored = restore(bytes.as_slice()).unwrap();
    assert_eq!(restored, bank);
    let a = bank.read(&q, &Vec3::y(), &Vec3::x(), 0.9).unwrap();
    let b = restored.read(&q, &Vec3::y(), &Vec3::x(), 0.9).unwrap();
    assert_eq!(a, b);
    assert_eq!(restored, bank);
    assert!(matches!(restore(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
}

#[test]
fn softmax_handles_large_scores() {
    let mut row = vec![1000.0, 1000.0, -1000.0];
    softmax_in_place(&mut row);
    assert_eq!(row, vec![0.5, 0.5, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), sigma in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = random_bank(&mut rng, 4, 3, 4);
        let q = random_block(&mut rng, 3, 4);
        let r = bank.read(&q, &random_unit(&mut rng), &random_unit(&mut rng), sigma).unwrap();
        for row in r.attention_aligned.iter_rows().chain(r.attention_comp.iter_rows()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn readout_is_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 4, 3, 4);
        let q = random_block(&mut rng, 2, 4);
        let (k0, kt) = (random_unit(&mut rng), random_unit(&mut rng));
        let a = bank.compute_readout(&q, &k0, &kt, 0.5).unwrap();
        let mut shuffled = bank.clone();
        let mut order: Vec<usize> = (0..bank.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        shuffled.permute(&order).unwrap();
        let b = shuffled.compute_readout(&q, &k0, &kt, 0.5).unwrap();
        prop_assert!(a.aligned.max_abs_diff(&b.aligned) < 1e-12);
        prop_assert!(a.complementary.max_abs_diff(&b.complementary) < 1e-12);
    }

    #[test]
    fn complementary_is_aligned_with_negated_direction(seed in any::<u64>(), tau in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(&mut rng, 5, 2, 5);
        let q = random_block(&mut rng, 3, 5);
        let d = random_unit(&mut rng);
        let c = bank.complementary_scores(&q, &d, tau).unwrap();
        let a = bank.aligned_scores(&q, &-d, tau).unwrap();
        prop_assert_eq!(c, a);
    }

    #[test]
    fn bank_never_exceeds_capacity(seed in any::<u64>(), writes in 1usize..30, cap_views in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 7;
        let mut bank = MemoryBank::new(cfg(3, p, p * cap_views + rng.gen_range(0..p))).unwrap();
        for t in 0..writes {
            if !bank.is_empty() {
                let q = random_block(&mut rng, p, 3);
                bank.read(&q, &Vec3::z(), &random_unit(&mut rng), 1.0).unwrap();
            }
            bank.write(&random_block(&mut rng, p, 3), &random_unit(&mut rng), &random_block(&mut rng, p, 3), t as u64).unwrap();
            prop_assert!(bank.len() <= bank.config().capacity_tokens);
        }
    }
}
