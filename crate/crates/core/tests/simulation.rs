use minesim::metrics::{efficiency_from_trace, instability};
use minesim::model::{LatencyMatrix, LatencyVector, SystemParams};
use minesim::scenarios::build_two_miner;
use minesim::sim::{finalize_chain, run_coordinated, run_p2p, StopCondition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn standard_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

#[test]
fn lone_miner_inter_mint_times_are_exponential() {
    let tau = 2.0;
    let params = SystemParams::new(&[1.0], tau).unwrap();
    let trace = run_coordinated(&params, &LatencyVector::new(vec![0.0]), StopCondition::Blocks(20_000), 11).unwrap();
    let mut times: Vec<f64> = trace.blocks.iter().skip(1).map(|b| b.mint_time).collect();
    times.sort_by(f64::total_cmp);
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let ks = gaps
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let cdf = 1.0 - (-g / tau).exp();
            (cdf - k as f64 / n).abs().max(((k + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    // critical value at the 0.1% level
    assert!(ks < 1.95 / n.sqrt(), "KS statistic {ks}");
}

/// Two miners, heights only: each keeps mining at its own rate and adopts
/// any strictly higher height that reaches it.
fn two_miner_heights_oracle(rates: [f64; 2], delay: f64, horizon: f64, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exps = rates.map(|r| Exp::new(r).unwrap());
    let mut heights = [0u64; 2];
    let mut next_mint = [exps[0].sample(&mut rng), exps[1].sample(&mut rng)];
    let mut in_flight: Vec<(f64, usize, u64)> = Vec::new();
    loop {
        let (mint_at, miner) = if next_mint[0] <= next_mint[1] { (next_mint[0], 0) } else { (next_mint[1], 1) };
        let arrival = in_flight.iter().enumerate().min_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).map(|(k, m)| (k, m.0));
        match arrival {
            Some((k, at)) if at <= mint_at || mint_at > horizon => {
                let (_, receiver, height) = in_flight.swap_remove(k);
                heights[receiver] = heights[receiver].max(height);
            }
            _ if mint_at > horizon => break,
            _ => {
                heights[miner] += 1;
                in_flight.push((mint_at + delay, 1 - miner, heights[miner]));
                next_mint[miner] = mint_at + exps[miner].sample(&mut rng);
            }
        }
    }
    heights[0].max(heights[1])
}

#[test]
fn p2p_engine_agrees_with_heights_oracle() {
    let (tau, delay, horizon) = (1.0, 0.8, 5_000.0);
    let params = SystemParams::new(&[0.35, 0.65], tau).unwrap();
    let matrix = LatencyMatrix::pair(delay);
    let engine: Vec<f64> = (0..24)
        .map(|seed| {
            let trace = run_p2p(&params, &matrix, StopCondition::Horizon(horizon), seed).unwrap();
            finalize_chain(&trace, seed).length() as f64 * tau / horizon
        })
        .collect();
    let oracle: Vec<f64> = (0..24)
        .map(|seed| two_miner_heights_oracle([0.35, 0.65], delay, horizon, 10_000 + seed) as f64 * tau / horizon)
        .collect();
    let gap = (mean(&engine) - mean(&oracle)).abs();
    let se = (standard_error(&engine).powi(2) + standard_error(&oracle).powi(2)).sqrt();
    assert!(gap < 4.0 * se, "engine {} oracle {} se {se}", mean(&engine), mean(&oracle));
}

#[test]
fn coordinated_win_share_matches_race() {
    let params = SystemParams::new(&[0.3, 0.7], 1.0).unwrap();
    let vector = LatencyVector::new(vec![0.5, 1.0]);
    let trace = run_coordinated(&params, &vector, StopCondition::Blocks(100_000), 3).unwrap();
    let chain = finalize_chain(&trace, 3);
    let from_first = chain.blocks.iter().filter(|&&b| b != 0 && trace.blocks[b].miner == Some(0)).count();
    let share = from_first as f64 / (chain.blocks.len() - 1) as f64;
    assert!((share - 0.4814).abs() < 0.01, "share {share}");
}

#[test]
fn coordinated_equidistant_efficiency_is_one_half() {
    let params = SystemParams::new(&[0.5, 0.5], 1.0).unwrap();
    let trace = run_coordinated(&params, &LatencyVector::uniform(2, 0.5), StopCondition::Blocks(100_000), 8).unwrap();
    let report = efficiency_from_trace(&trace, &finalize_chain(&trace, 8), &params).unwrap();
    assert!((report.overall - 0.5).abs() < 0.01, "eta {}", report.overall);
}

#[test]
fn equal_miners_are_treated_alike_in_p2p() {
    let params = SystemParams::new(&[0.5, 0.5], 1.0).unwrap();
    let trace = run_p2p(&params, &LatencyMatrix::pair(1.0), StopCondition::Blocks(100_000), 21).unwrap();
    let report = efficiency_from_trace(&trace, &finalize_chain(&trace, 21), &params).unwrap();
    let (a, b) = (report.individual[0].unwrap(), report.individual[1].unwrap());
    assert!((a - b).abs() < 0.02, "{a} vs {b}");
}

#[test]
fn midpoint_observer_sees_the_most_forks() {
    let scenario = build_two_miner([50.0, 50.0], 1.0, &[0.05, 0.5, 0.95]).unwrap().with_lambda(1.0).resolve().unwrap();
    let mut counts: [Vec<u64>; 3] = Default::default();
    for seed in 0..10 {
        let trace = run_p2p(&scenario.params, &scenario.matrix, StopCondition::Blocks(20_000), seed).unwrap();
        let report = instability(&trace, &finalize_chain(&trace, seed));
        for (k, node) in [2usize, 3, 4].into_iter().enumerate() {
            counts[k].push(report.nodes[node].fork_count);
        }
    }
    let medians: Vec<u64> = counts
        .iter_mut()
        .map(|c| {
            c.sort();
            c[c.len() / 2]
        })
        .collect();
    assert!(medians[1] >= medians[0] && medians[1] >= medians[2], "medians {medians:?}");
}

#[test]
fn zero_latency_p2p_never_forks() {
    let params = SystemParams::new(&[0.2, 0.3, 0.5], 1.0).unwrap();
    let trace = run_p2p(&params, &LatencyMatrix::uniform(3, 0.0), StopCondition::Blocks(5_000), 1).unwrap();
    let chain = finalize_chain(&trace, 1);
    assert_eq!(chain.length(), 5_000);
    assert!(instability(&trace, &chain).nodes.iter().all(|n| n.fork_count == 0));
}

#[test]
fn horizon_runs_never_mint_late() {
    let params = SystemParams::new(&[0.5, 0.5], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let horizon = rng.random_range(10.0..200.0);
        let trace = run_p2p(&params, &LatencyMatrix::pair(0.7), StopCondition::Horizon(horizon), 5).unwrap();
        assert!(trace.blocks.iter().all(|b| b.mint_time <= horizon));
    }
}

#[test]
fn equal_pair_matches_oracle_within_two_percent() {
    let params = SystemParams::new(&[0.5, 0.5], 1.0).unwrap();
    let trace = run_p2p(&params, &LatencyMatrix::pair(1.0), StopCondition::Blocks(100_000), 2).unwrap();
    let engine = efficiency_from_trace(&trace, &finalize_chain(&trace, 2), &params).unwrap().overall;
    let oracle: Vec<f64> =
        (0..30).map(|seed| two_miner_heights_oracle([0.5, 0.5], 1.0, 10_000.0, 500 + seed) as f64 / 10_000.0).collect();
    assert!((engine - mean(&oracle)).abs() < 0.02, "engine {engine} oracle {}", mean(&oracle));
}
