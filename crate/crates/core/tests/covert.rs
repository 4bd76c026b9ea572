use proptest::prelude::*;
use xpt_sim::covert::{
    run_channel, run_channel_traced, ChannelConfig, ChannelVariant, FlushSender, MessagePattern,
    CALIBRATED_EVICT_NOISE, CALIBRATED_FLUSH_NOISE,
};
use xpt_sim::ids::{ExecContext, VirtPage};
use xpt_sim::kernel::{NoiseModel, Schedule, SimConfig, SimThread, Simulator, TraceKind};
use xpt_sim::mem::MapOptions;

const VARIANTS: [ChannelVariant; 2] = [ChannelVariant::FlushBased, ChannelVariant::EvictionBased];

fn quiet(variant: ChannelVariant, seed: u64) -> ChannelConfig {
    ChannelConfig::new(variant).with_noise(NoiseModel {
        seed,
        spurious_walk_prob: 0.0,
        jitter: 0,
    })
}

fn noisy(variant: ChannelVariant, seed: u64, p: f64) -> ChannelConfig {
    ChannelConfig::new(variant).with_noise(NoiseModel {
        seed,
        spurious_walk_prob: p,
        jitter: 10,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_noise_is_error_free(
        message in prop::collection::vec(any::<bool>(), 1..300),
        seed in any::<u64>(),
        evict in any::<bool>(),
    ) {
        let variant = VARIANTS[usize::from(evict)];
        let cfg = ChannelConfig::new(variant).with_noise(NoiseModel::with_seed(seed));
        let stats = run_channel(&message, &cfg).unwrap();
        prop_assert_eq!(stats.errors, 0);
        prop_assert_eq!(&stats.decoded_bits, &message);
    }

    #[test]
    fn fewer_transitions_never_cost_more(
        message in prop::collection::vec(any::<bool>(), 2..120),
        seed in any::<u64>(),
        evict in any::<bool>(),
    ) {
        let variant = VARIANTS[usize::from(evict)];
        let mut grouped = message.clone();
        grouped.sort_unstable_by(|a, b| b.cmp(a));
        let t = run_channel(&message, &quiet(variant, seed)).unwrap().sim_cycles;
        let t_grouped = run_channel(&grouped, &quiet(variant, seed)).unwrap().sim_cycles;
        prop_assert!(t >= t_grouped, "{} < {}", t, t_grouped);
    }
}

#[test]
fn error_rate_matches_hamming_distance() {
    let msg = MessagePattern::Random.generate(2_000, 4);
    let stats = run_channel(&msg, &noisy(ChannelVariant::EvictionBased, 4, 0.3)).unwrap();
    let hamming = stats
        .sent_bits
        .iter()
        .zip(&stats.decoded_bits)
        .filter(|(a, b)| a != b)
        .count();
    assert!(hamming > 0);
    assert_eq!(stats.errors, hamming);
    assert_eq!(stats.error_rate, hamming as f64 / 2_000.0);
}

#[test]
fn all_ones_cost_is_flat_after_the_first_bit() {
    for variant in VARIANTS {
        let msg = vec![true; 500];
        let stats = run_channel(&msg, &quiet(variant, 2)).unwrap();
        let steady = stats.bit_cycles[1];
        assert!(stats.bit_cycles[1..].iter().all(|&c| c == steady), "{variant}");
        assert!(stats.bit_cycles[0] >= steady);
    }
}

#[test]
fn zero_noise_all_ones_throughput_is_variant_independent() {
    let msg = vec![true; 1_000];
    let flush = run_channel(&msg, &quiet(ChannelVariant::FlushBased, 1)).unwrap();
    let evict = run_channel(&msg, &quiet(ChannelVariant::EvictionBased, 1)).unwrap();
    let ratio = flush.throughput_bytes_per_sec / evict.throughput_bytes_per_sec;
    assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
}

#[test]
fn alternating_is_slower_than_all_ones() {
    for variant in VARIANTS {
        let ones = run_channel(&vec![true; 400], &quiet(variant, 3)).unwrap();
        let alt = run_channel(&MessagePattern::Alternating.generate(400, 3), &quiet(variant, 3)).unwrap();
        assert!(alt.throughput_bytes_per_sec < ones.throughput_bytes_per_sec, "{variant}");
    }
}

/// Both channels expose exactly the idle half of an alternating message to
/// spurious walks, so the error density converges to half the walk rate.
#[test]
fn noise_mask_density_converges() {
    for (variant, p) in [
        (ChannelVariant::EvictionBased, CALIBRATED_EVICT_NOISE),
        (ChannelVariant::EvictionBased, 0.08),
        (ChannelVariant::FlushBased, 0.1),
    ] {
        let msg = MessagePattern::Alternating.generate(10_000, 9);
        let stats = run_channel(&msg, &noisy(variant, 9, p)).unwrap();
        let expected = p / 2.0;
        let rel = (stats.error_rate - expected).abs() / expected;
        assert!(rel <= 0.25, "{variant} p={p}: {} vs {expected}", stats.error_rate);
    }
}

#[test]
fn calibrated_flush_noise_is_about_half_a_percent() {
    let msg = MessagePattern::Alternating.generate(10_000, 1);
    let stats = run_channel(&msg, &noisy(ChannelVariant::FlushBased, 1, CALIBRATED_FLUSH_NOISE)).unwrap();
    assert!((0.002..=0.008).contains(&stats.error_rate), "{}", stats.error_rate);
}

#[test]
fn flush_sender_operation_counts() {
    let tx = ExecContext::new(0, 1, 1);
    let page = VirtPage(0x50);
    let mut sim = Simulator::new(SimConfig::with_seed(1)).unwrap();
    sim.mem_mut().map_page(tx, page, MapOptions::new()).unwrap();
    let trace = sim
        .run(
            vec![SimThread::new("tx", tx, move |cpu| async move {
                let mut s = FlushSender::new(tx.asid, page);
                s.send_bit(&cpu, true).await?;
                cpu.compute(0).await?;
                s.send_bit(&cpu, true).await?;
                cpu.compute(0).await?;
                s.send_bit(&cpu, false).await
            })],
            Schedule::RoundRobinBySemaphore,
        )
        .unwrap();
    let kinds: Vec<TraceKind> = trace.records().iter().map(|r| r.kind).collect();
    let marks: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == TraceKind::Compute)
        .map(|(i, _)| i)
        .collect();
    let cold = &kinds[..marks[0]];
    assert_eq!(cold.iter().filter(|k| **k == TraceKind::FlushLine).count(), 64);
    assert_eq!(cold.iter().filter(|k| **k == TraceKind::Train).count(), 32);
    assert_eq!(cold.len(), 96);
    assert_eq!(marks[1], marks[0] + 1, "repeated 1 must issue nothing");
    assert_eq!(&kinds[marks[1] + 1..], &[TraceKind::TlbFlush]);
}

#[test]
fn traced_run_covers_transmission_only() {
    let msg = MessagePattern::Alternating.generate(20, 0);
    let run = run_channel_traced(&msg, &quiet(ChannelVariant::FlushBased, 0)).unwrap();
    assert_eq!(run.trace.total_cost(), run.stats.sim_cycles);
    assert_eq!(run.trace.records_of("receiver").filter(|r| r.kind == TraceKind::Probe).count(), 20);
}
