//! Covert channels over one shared page.
//!
//! Flush-based: sender and receiver live in different processes that share a
//! page. A 1 keeps the page primed (training on lines 0..32 only when it is
//! not), a 0 resets it with a page-scoped TLB shootdown. The receiver probes
//! one line in 32..64 and reads an optimized miss as 1.
//!
//! Eviction-based: sender and receiver are threads of one process. The
//! receiver keeps its page primed. A 1 is an idle round; a 0 is one page walk
//! by the sender, which displaces the receiver's entry. The receiver reads an
//! optimized miss as 1 and retrains after every normal miss. Idle-for-1 makes
//! an all-ones message cost one probe per bit on both channels.
//!
//! Both channels alternate one sender phase and one receiver phase per round
//! under a FIFO semaphore. Channel setup runs before the timed window.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, SimError};
use crate::ids::{Asid, ExecContext, VirtPage, LINES_PER_PAGE};
use crate::kernel::{
    CostModel, Cpu, EventTrace, NoiseModel, Schedule, SimConfig, SimThread, Simulator,
};
use crate::mem::{LatencyClass, MachineConfig, MapOptions};
use crate::primitives::{
    evict_oldest_of, irregular_order, pick_probe_line, probe_page, reset_via_tlb_flush,
    train_lines, train_page,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelVariant {
    FlushBased,
    EvictionBased,
}

impl ChannelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelVariant::FlushBased => "flush",
            ChannelVariant::EvictionBased => "evict",
        }
    }

    /// (sender, receiver) identities. Distinct cores on both variants.
    pub fn contexts(self) -> (ExecContext, ExecContext) {
        match self {
            ChannelVariant::FlushBased => (ExecContext::new(0, 1, 1), ExecContext::new(1, 2, 1)),
            ChannelVariant::EvictionBased => {
                (ExecContext::new(0, 1, 1), ExecContext::new(1, 1, 2))
            }
        }
    }
}

impl fmt::Display for ChannelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spurious-walk probability that yields an 8% error rate on the
/// alternating pattern of the eviction channel. Only idle (1) rounds are
/// exposed, so the error rate is half the walk probability.
pub const CALIBRATED_EVICT_NOISE: f64 = 0.16;

/// Spurious-walk probability that yields a 0.5% error rate on the
/// alternating pattern of the flush channel.
pub const CALIBRATED_FLUSH_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub variant: ChannelVariant,
    pub shared_vpage: VirtPage,
    pub rounds_per_bit: u32,
    pub noise: NoiseModel,
    pub machine: MachineConfig,
    pub costs: CostModel,
    /// Never-touched pages the eviction sender cycles through. Must exceed
    /// the TLB capacity so each page is cold when reused.
    pub evict_pool_pages: usize,
}

impl ChannelConfig {
    pub fn new(variant: ChannelVariant) -> Self {
        ChannelConfig {
            variant,
            shared_vpage: VirtPage(0x7f000),
            rounds_per_bit: 1,
            noise: NoiseModel::default(),
            machine: MachineConfig::default(),
            costs: CostModel::default(),
            evict_pool_pages: 2048,
        }
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds_per_bit == 0 {
            return Err(ConfigError::invalid("rounds_per_bit", "must be at least 1"));
        }
        if self.variant == ChannelVariant::EvictionBased
            && self.evict_pool_pages <= self.machine.tlb_capacity
        {
            return Err(ConfigError::invalid(
                "evict_pool_pages",
                "must exceed the TLB capacity",
            ));
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            machine: self.machine.clone(),
            costs: self.costs.clone(),
            noise: self.noise.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessagePattern {
    Ones,
    Zeros,
    /// 1, 0, 1, 0, ...
    Alternating,
    Random,
}

impl MessagePattern {
    pub const ALL: [MessagePattern; 4] = [
        MessagePattern::Ones,
        MessagePattern::Zeros,
        MessagePattern::Alternating,
        MessagePattern::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessagePattern::Ones => "ones",
            MessagePattern::Zeros => "zeros",
            MessagePattern::Alternating => "alternating",
            MessagePattern::Random => "random",
        }
    }

    pub fn generate(self, bits: usize, seed: u64) -> Vec<bool> {
        match self {
            MessagePattern::Ones => vec![true; bits],
            MessagePattern::Zeros => vec![false; bits],
            MessagePattern::Alternating => (0..bits).map(|i| i % 2 == 0).collect(),
            MessagePattern::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(7);
                (0..bits).map(|_| rng.gen()).collect()
            }
        }
    }
}

impl fmt::Display for MessagePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessagePattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessagePattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown pattern `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub variant: ChannelVariant,
    pub sent_bits: Vec<bool>,
    pub decoded_bits: Vec<bool>,
    pub errors: usize,
    pub error_rate: f64,
    pub sim_cycles: u64,
    pub sim_ns: f64,
    pub throughput_bytes_per_sec: f64,
    /// Simulated cycles between the ends of consecutive decoded bits; the
    /// first entry is measured from the start of transmission.
    pub bit_cycles: Vec<u64>,
}

pub const CHANNEL_CSV_HEADER: &str = "variant,pattern,bits,errors,error_rate,sim_ns,throughput_Bps";

impl ChannelStats {
    pub fn csv_row(&self, pattern: &str) -> String {
        format!(
            "{},{},{},{},{:.6},{:.1},{:.1}",
            self.variant,
            pattern,
            self.sent_bits.len(),
            self.errors,
            self.error_rate,
            self.sim_ns,
            self.throughput_bytes_per_sec
        )
    }
}

pub struct ChannelRun {
    pub stats: ChannelStats,
    /// Transmission window only.
    pub trace: EventTrace,
}

/// Flush-channel sender. Tracks whether its last action left the page primed.
#[derive(Debug, Clone)]
pub struct FlushSender {
    asid: Asid,
    page: VirtPage,
    primed: bool,
}

impl FlushSender {
    pub fn new(asid: Asid, page: VirtPage) -> Self {
        FlushSender {
            asid,
            page,
            primed: false,
        }
    }

    pub fn believes_primed(&self) -> bool {
        self.primed
    }

    pub async fn send_bit(&mut self, cpu: &Cpu, bit: bool) -> Result<(), SimError> {
        if bit {
            if !self.primed {
                let mut lines: Vec<u8> = (0..LINES_PER_PAGE / 2).collect();
                irregular_order(&mut *cpu.rng(), &mut lines);
                train_lines(cpu, self.page, &lines).await?;
                self.primed = true;
            }
        } else {
            reset_via_tlb_flush(cpu, self.asid, self.page).await?;
            self.primed = false;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlushReceiver {
    page: VirtPage,
}

impl FlushReceiver {
    pub fn new(page: VirtPage) -> Self {
        FlushReceiver { page }
    }

    pub async fn receive_bit(&self, cpu: &Cpu) -> Result<bool, SimError> {
        let line = cpu.rng().gen_range(LINES_PER_PAGE / 2..LINES_PER_PAGE);
        cpu.flush_line(self.page.line_addr(line)).await?;
        let probe = probe_page(cpu, self.page, line).await?;
        Ok(probe.class == LatencyClass::OptimizedMiss)
    }
}

#[derive(Debug, Clone)]
pub struct EvictSender {
    pool: Vec<VirtPage>,
    next: usize,
}

impl EvictSender {
    pub fn new(pool: Vec<VirtPage>) -> Self {
        assert!(!pool.is_empty(), "eviction pool is empty");
        EvictSender { pool, next: 0 }
    }

    pub async fn send_bit(&mut self, cpu: &Cpu, bit: bool) -> Result<(), SimError> {
        if !bit {
            let page = self.pool[self.next];
            self.next = (self.next + 1) % self.pool.len();
            evict_oldest_of(cpu, page).await?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EvictReceiver {
    page: VirtPage,
    trained: Vec<u8>,
}

impl EvictReceiver {
    pub fn new(page: VirtPage) -> Self {
        EvictReceiver {
            page,
            trained: Vec::new(),
        }
    }

    pub async fn prepare(&mut self, cpu: &Cpu) -> Result<(), SimError> {
        self.trained = train_page(cpu, self.page).await?;
        Ok(())
    }

    pub async fn receive_bit(&mut self, cpu: &Cpu) -> Result<bool, SimError> {
        let line = pick_probe_line(&mut *cpu.rng(), &self.trained);
        cpu.flush_line(self.page.line_addr(line)).await?;
        let probe = probe_page(cpu, self.page, line).await?;
        if probe.class == LatencyClass::OptimizedMiss {
            Ok(true)
        } else {
            self.prepare(cpu).await?;
            Ok(false)
        }
    }
}

enum Sender {
    Flush(FlushSender),
    Evict(EvictSender),
}

impl Sender {
    async fn send_bit(&mut self, cpu: &Cpu, bit: bool) -> Result<(), SimError> {
        match self {
            Sender::Flush(s) => s.send_bit(cpu, bit).await,
            Sender::Evict(s) => s.send_bit(cpu, bit).await,
        }
    }
}

enum Receiver {
    Flush(FlushReceiver),
    Evict(EvictReceiver),
}

impl Receiver {
    async fn receive_bit(&mut self, cpu: &Cpu) -> Result<bool, SimError> {
        match self {
            Receiver::Flush(r) => r.receive_bit(cpu).await,
            Receiver::Evict(r) => r.receive_bit(cpu).await,
        }
    }
}

pub fn run_channel(message: &[bool], config: &ChannelConfig) -> Result<ChannelStats, SimError> {
    run_channel_traced(message, config).map(|run| run.stats)
}

pub fn run_channel_traced(message: &[bool], config: &ChannelConfig) -> Result<ChannelRun, SimError> {
    if message.is_empty() {
        return Err(SimError::Protocol("message is empty".into()));
    }
    config.validate()?;
    let mut sim = Simulator::new(config.sim_config())?;
    let (tx_ctx, rx_ctx) = config.variant.contexts();
    let page = config.shared_vpage;

    let (sender, receiver) = match config.variant {
        ChannelVariant::FlushBased => {
            sim.mem_mut()
                .map_page(tx_ctx, page, MapOptions::new().shared_with([rx_ctx.asid]).locked())?;
            let slot = Rc::new(RefCell::new(None));
            let out = Rc::clone(&slot);
            let setup = SimThread::new("sender", tx_ctx, move |cpu| async move {
                let mut s = FlushSender::new(tx_ctx.asid, page);
                s.send_bit(&cpu, true).await?;
                *out.borrow_mut() = Some(s);
                Ok(())
            });
            sim.run(vec![setup], Schedule::RoundRobinBySemaphore)?;
            let s = slot.borrow_mut().take().expect("setup ran");
            (Sender::Flush(s), Receiver::Flush(FlushReceiver::new(page)))
        }
        ChannelVariant::EvictionBased => {
            sim.mem_mut().map_page(rx_ctx, page, MapOptions::new().locked())?;
            let mut pool = Vec::with_capacity(config.evict_pool_pages);
            for k in 0..config.evict_pool_pages {
                let v = page.offset(1 + k as u64);
                sim.mem_mut().map_page(tx_ctx, v, MapOptions::new().locked())?;
                pool.push(v);
            }
            let slot = Rc::new(RefCell::new(None));
            let out = Rc::clone(&slot);
            let setup = SimThread::new("receiver", rx_ctx, move |cpu| async move {
                let mut r = EvictReceiver::new(page);
                r.prepare(&cpu).await?;
                *out.borrow_mut() = Some(r);
                Ok(())
            });
            sim.run(vec![setup], Schedule::RoundRobinBySemaphore)?;
            let r = slot.borrow_mut().take().expect("setup ran");
            (Sender::Evict(EvictSender::new(pool)), Receiver::Evict(r))
        }
    };

    let lock = sim.new_semaphore();
    let rounds = config.rounds_per_bit;
    let start = sim.now();
    let decoded = Rc::new(RefCell::new(Vec::with_capacity(message.len())));
    let ends = Rc::new(RefCell::new(Vec::with_capacity(message.len())));

    let bits = message.to_vec();
    let mut sender = sender;
    let tx = SimThread::new("sender", tx_ctx, move |cpu| async move {
        for bit in bits {
            for _ in 0..rounds {
                cpu.acquire(lock).await?;
                sender.send_bit(&cpu, bit).await?;
                cpu.release(lock).await?;
            }
        }
        Ok(())
    });

    let n = message.len();
    let (decoded_out, ends_out) = (Rc::clone(&decoded), Rc::clone(&ends));
    let mut receiver = receiver;
    let rx = SimThread::new("receiver", rx_ctx, move |cpu| async move {
        for _ in 0..n {
            let mut ones = 0;
            for _ in 0..rounds {
                cpu.acquire(lock).await?;
                ones += u32::from(receiver.receive_bit(&cpu).await?);
                cpu.release(lock).await?;
            }
            decoded_out.borrow_mut().push(2 * ones > rounds);
            ends_out.borrow_mut().push(cpu.now());
        }
        Ok(())
    })
    .noise_target();

    let trace = sim.run(vec![tx, rx], Schedule::RoundRobinBySemaphore)?;
    let sim_cycles = sim.now() - start;
    let decoded_bits = decoded.take();
    let ends = ends.take();
    let bit_cycles = ends
        .iter()
        .scan(start, |prev, &end| {
            let d = end - *prev;
            *prev = end;
            Some(d)
        })
        .collect();
    let errors = message
        .iter()
        .zip(&decoded_bits)
        .filter(|(a, b)| a != b)
        .count();
    let sim_ns = sim.clock().to_ns(sim_cycles);
    Ok(ChannelRun {
        stats: ChannelStats {
            variant: config.variant,
            sent_bits: message.to_vec(),
            decoded_bits,
            errors,
            error_rate: errors as f64 / n as f64,
            sim_cycles,
            sim_ns,
            throughput_bytes_per_sec: (n as f64 / 8.0) / (sim_ns * 1e-9),
            bit_cycles,
        },
        trace,
    })
}
