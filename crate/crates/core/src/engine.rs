//! Deterministic discrete-event kernel.
//!
//! Time is integer nanoseconds. Events fire in nondecreasing time order and
//! events sharing a timestamp fire in the order they were scheduled. Every
//! stochastic decision draws from a named substream so that adding a new
//! decision site never perturbs the draws seen by existing ones.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulated time in nanoseconds.
pub type Time = u64;

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;
pub const NS_PER_SEC: u64 = 1_000_000_000;

/// Who an event is addressed to. Only used for tracing and bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    Host,
    Ssd(u8),
    Fabric,
    Workload(u16),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Host => write!(f, "host"),
            Actor::Ssd(id) => write!(f, "ssd{id}"),
            Actor::Fabric => write!(f, "fabric"),
            Actor::Workload(id) => write!(f, "wl{id}"),
        }
    }
}

/// Handle returned by [`Engine::schedule`]; can be used to cancel the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_time: Time,
    pub sequence: u64,
    pub target: Actor,
    pub payload: P,
}

struct Queued<P>(SimEvent<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_time == other.0.fire_time && self.0.sequence == other.0.sequence
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_time, other.0.sequence).cmp(&(self.0.fire_time, self.0.sequence))
    }
}

/// Counters reported by [`Engine::run_until`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DispatchStats {
    pub dispatched: u64,
    pub cancelled: u64,
    pub pending: u64,
    pub scheduled: u64,
}

/// Named, independently seeded uniform random substreams.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    streams: HashMap<String, ChaCha8Rng>,
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            streams: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mutable access to the generator backing `name`.
    pub fn stream(&mut self, name: &str) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry(name.to_string()).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(name));
            rng
        })
    }

    /// Uniform draw in `[0, 1)` from the named substream.
    pub fn draw(&mut self, name: &str) -> f64 {
        self.stream(name).random::<f64>()
    }
}

/// The event queue, simulated clock and seeded randomness.
pub struct Engine<P> {
    now: Time,
    next_seq: u64,
    heap: BinaryHeap<Queued<P>>,
    cancelled: HashSet<u64>,
    stats: DispatchStats,
    rng: RngStreams,
    trace: Option<Vec<String>>,
}

impl<P: fmt::Debug> Engine<P> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            stats: DispatchStats::default(),
            rng: RngStreams::new(seed),
            trace: None,
        }
    }

    /// Record one line per dispatched event.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[String]> {
        self.trace.as_deref()
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn rng(&mut self) -> &mut RngStreams {
        &mut self.rng
    }

    pub fn rng_draw(&mut self, stream: &str) -> f64 {
        self.rng.draw(stream)
    }

    /// Enqueue `payload` to fire `delay` ns from now.
    pub fn schedule(&mut self, delay: Time, target: Actor, payload: P) -> EventHandle {
        self.schedule_at(self.now + delay, target, payload)
    }

    /// Enqueue at an absolute time. Scheduling into the past is a bug.
    pub fn schedule_at(&mut self, at: Time, target: Actor, payload: P) -> EventHandle {
        assert!(at >= self.now, "event scheduled in the past: {at} < {}", self.now);
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.stats.scheduled += 1;
        self.stats.pending += 1;
        self.heap.push(Queued(SimEvent {
            fire_time: at,
            sequence,
            target,
            payload,
        }));
        EventHandle(sequence)
    }

    /// Signed-delay variant for callers that compute delays arithmetically.
    pub fn schedule_signed(&mut self, delay: i64, target: Actor, payload: P) -> Result<EventHandle, crate::SimError> {
        if delay < 0 {
            return Err(crate::SimError::NegativeDelay(delay));
        }
        Ok(self.schedule(delay as Time, target, payload))
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq || self.cancelled.contains(&handle.0) {
            return false;
        }
        let pending = self.heap.iter().any(|q| q.0.sequence == handle.0);
        if pending {
            self.cancelled.insert(handle.0);
            self.stats.pending -= 1;
            self.stats.cancelled += 1;
        }
        pending
    }

    /// Pop the next event with `fire_time <= end`, advancing the clock to it.
    pub fn pop_until(&mut self, end: Time) -> Option<SimEvent<P>> {
        loop {
            let top = self.heap.peek()?;
            if top.0.fire_time > end {
                return None;
            }
            let ev = self.heap.pop().expect("peeked").0;
            if self.cancelled.remove(&ev.sequence) {
                continue;
            }
            debug_assert!(ev.fire_time >= self.now);
            self.now = ev.fire_time;
            self.stats.pending -= 1;
            self.stats.dispatched += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(format!("{} {} {:?}", ev.fire_time, ev.target, ev.payload));
            }
            return Some(ev);
        }
    }

    /// Advance the clock to `end` once no more events are due before it.
    pub fn finish_at(&mut self, end: Time) {
        if end > self.now {
            self.now = end;
        }
    }

    /// Dispatch every event up to `end` through `handler`, then park the clock
    /// at `end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, end: Time, mut handler: F) -> DispatchStats
    where
        F: FnMut(&mut Self, SimEvent<P>),
    {
        while let Some(ev) = self.pop_until(end) {
            handler(self, ev);
        }
        self.finish_at(end);
        self.stats
    }

    pub fn stats(&self) -> DispatchStats {
        self.stats
    }

    pub fn is_idle(&self) -> bool {
        self.stats.pending == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Ev {
        Tick,
        Named(&'static str),
        FlashDone,
    }

    #[test]
    fn zero_delay_fires_before_later_events() {
        let mut e = Engine::new(1);
        e.schedule(5, Actor::Host, Ev::Named("later"));
        e.schedule(0, Actor::Host, Ev::Tick);
        let first = e.pop_until(100).unwrap();
        assert_eq!(first.payload, Ev::Tick);
        assert_eq!(first.fire_time, 0);
    }

    #[test]
    fn equal_times_dispatch_in_schedule_order() {
        let mut e = Engine::new(1);
        e.schedule(100, Actor::Host, Ev::Named("A"));
        e.schedule(100, Actor::Ssd(0), Ev::Named("B"));
        let mut order = Vec::new();
        e.run_until(1_000, |_, ev| order.push(ev.payload));
        assert_eq!(order, vec![Ev::Named("A"), Ev::Named("B")]);
    }

    #[test]
    fn delay_is_relative_to_now() {
        let mut e = Engine::new(1);
        e.schedule(5_000, Actor::Host, Ev::Tick);
        let ev = e.pop_until(u64::MAX).unwrap();
        assert_eq!(ev.fire_time, 5_000);
        e.schedule(30_000, Actor::Ssd(0), Ev::FlashDone);
        assert_eq!(e.pop_until(u64::MAX).unwrap().fire_time, 35_000);
    }

    #[test]
    fn negative_delay_rejected() {
        let mut e: Engine<Ev> = Engine::new(1);
        assert!(e.schedule_signed(-1, Actor::Host, Ev::Tick).is_err());
        assert!(e.schedule_signed(0, Actor::Host, Ev::Tick).is_ok());
    }

    #[test]
    fn empty_run_parks_clock_at_end() {
        let mut e: Engine<Ev> = Engine::new(1);
        let stats = e.run_until(1_000_000_000, |_, _| {});
        assert_eq!(stats.dispatched, 0);
        assert_eq!(e.now(), 1_000_000_000);
    }

    #[test]
    fn single_event_then_cap() {
        let mut e = Engine::new(1);
        e.schedule(10, Actor::Host, Ev::Tick);
        let stats = e.run_until(500, |_, _| {});
        assert_eq!(stats.dispatched, 1);
        assert_eq!(e.now(), 500);
    }

    #[test]
    fn cancellation_and_conservation() {
        let mut e = Engine::new(1);
        let a = e.schedule(10, Actor::Host, Ev::Tick);
        let _b = e.schedule(20, Actor::Host, Ev::Tick);
        let _c = e.schedule(2_000, Actor::Host, Ev::Tick);
        assert!(e.cancel(a));
        assert!(!e.cancel(a));
        let s = e.run_until(1_000, |_, _| {});
        assert_eq!(s.dispatched + s.cancelled + s.pending, s.scheduled);
        assert_eq!((s.dispatched, s.cancelled, s.pending), (1, 1, 1));
    }

    #[test]
    fn handler_can_schedule_follow_ups() {
        let mut e = Engine::new(1);
        e.schedule(0, Actor::Host, Ev::Tick);
        let mut seen = 0;
        e.run_until(100, |eng, ev| {
            seen += 1;
            if ev.fire_time < 50 {
                eng.schedule(10, Actor::Host, Ev::Tick);
            }
        });
        assert_eq!(seen, 6);
    }

    fn run_log(seed: u64) -> Vec<String> {
        let mut e = Engine::new(seed);
        e.enable_trace();
        e.schedule(0, Actor::Host, Ev::Tick);
        e.run_until(1_000_000, |eng, _| {
            let d = (eng.rng_draw("workload") * 10_000.0) as u64;
            if eng.now() < 900_000 {
                eng.schedule(d, Actor::Ssd((d % 4) as u8), Ev::Tick);
            }
        });
        e.trace().unwrap().to_vec()
    }

    #[test]
    fn identical_seed_gives_identical_dispatch_log() {
        let a = run_log(7);
        let b = run_log(7);
        assert!(a.len() > 100);
        assert_eq!(a, b);
        assert_ne!(a, run_log(8));
    }

    #[test]
    fn same_stream_same_sequence() {
        let mut a = RngStreams::new(3);
        let mut b = RngStreams::new(3);
        for _ in 0..100 {
            assert_eq!(a.draw("redirect"), b.draw("redirect"));
        }
    }

    #[test]
    fn substreams_are_uncorrelated() {
        let mut r = RngStreams::new(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.draw("redirect")).collect();
        let ys: Vec<f64> = (0..n).map(|_| r.draw("workload")).collect();
        assert_ne!(xs[..10], ys[..10]);
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx).powi(2);
            vy += (y - my).powi(2);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr.abs() < 0.05, "corr = {corr}");
    }

    #[test]
    fn interleaving_another_stream_does_not_perturb() {
        let mut a = RngStreams::new(5);
        let mut b = RngStreams::new(5);
        let xa: Vec<f64> = (0..50).map(|_| a.draw("redirect")).collect();
        let xb: Vec<f64> = (0..50)
            .map(|_| {
                b.draw("gc");
                b.draw("redirect")
            })
            .collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn uniform_mean_converges() {
        let mut r = RngStreams::new(99);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.draw("workload")).sum::<f64>() / n as f64;
        assert!((0.499..=0.501).contains(&mean), "mean = {mean}");
    }
}
