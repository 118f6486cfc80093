//! Deterministic discrete-event engine and seeded randomness.
//!
//! Time is an integer count of microseconds so that traces replay
//! bit-exactly. Events are totally ordered by `(fire_at, seq)` where `seq`
//! is a global insertion counter; ties therefore resolve in insertion
//! order. Every component draws randomness from its own ChaCha stream
//! derived from `(scenario seed, stream id)`, so adding a component never
//! perturbs the draw sequences of the others.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Microseconds since scenario start.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Default,
    serde::Serialize,
    serde::Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub const fn add_micros(self, us: u64) -> Self {
        SimTime(self.0 + us)
    }

    pub const fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Handle to a component registered with the event loop. Only used for
/// event targeting and trace labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId(u32);

impl ComponentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Payloads must name their kind for the event-trace log.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: ComponentId,
    pub payload: P,
}

struct HeapEntry<P>(Event<P>);

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}
impl<P> Eq for HeapEntry<P> {}

impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
impl<P> Ord for HeapEntry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled in the past: fire_at={fire_at} < clock={clock}")]
    ScheduleInPast { fire_at: SimTime, clock: SimTime },
    #[error("run_until horizon {horizon} precedes clock {clock}")]
    HorizonInPast { horizon: SimTime, clock: SimTime },
    #[error("event dequeued out of order: ({at}, {seq}) after ({prev_at}, {prev_seq})")]
    OrderViolation {
        at: SimTime,
        seq: u64,
        prev_at: SimTime,
        prev_seq: u64,
    },
}

/// Single-threaded event loop. A loop instance is self-contained and may be
/// moved between threads; separate instances share no state.
pub struct EventLoop<P> {
    clock: SimTime,
    next_seq: u64,
    heap: BinaryHeap<HeapEntry<P>>,
    names: Vec<String>,
    trace: Option<Box<dyn Write + Send>>,
    last_dequeued: Option<(SimTime, u64)>,
    processed_total: u64,
}

impl<P: EventKind> EventLoop<P> {
    pub fn new() -> Self {
        EventLoop {
            clock: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            names: Vec::new(),
            trace: None,
            last_dequeued: None,
            processed_total: 0,
        }
    }

    /// Registers a named component and returns its id.
    pub fn register(&mut self, name: impl Into<String>) -> ComponentId {
        let id = ComponentId(self.names.len() as u32);
        self.names.push(name.into());
        id
    }

    pub fn component_name(&self, id: ComponentId) -> &str {
        &self.names[id.index()]
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn processed_total(&self) -> u64 {
        self.processed_total
    }

    /// Installs a sink receiving one line per dequeued event:
    /// `t=<us> seq=<n> target=<name> kind=<payload-kind>`.
    pub fn set_trace(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    pub fn take_trace(&mut self) -> Option<Box<dyn Write + Send>> {
        self.trace.take()
    }

    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        target: ComponentId,
        payload: P,
    ) -> Result<(), SimError> {
        if fire_at < self.clock {
            return Err(SimError::ScheduleInPast {
                fire_at,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry(Event {
            fire_at,
            seq,
            target,
            payload,
        }));
        Ok(())
    }

    pub fn schedule_in(
        &mut self,
        delay_us: u64,
        target: ComponentId,
        payload: P,
    ) -> Result<(), SimError> {
        self.schedule(self.clock.add_micros(delay_us), target, payload)
    }

    /// Processes every event with `fire_at <= t_end` in `(fire_at, seq)`
    /// order, then advances the clock to `t_end`. Returns the number of
    /// events processed by this call.
    pub fn run_until<E, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, RunError<E>>
    where
        F: FnMut(&mut Self, Event<P>) -> Result<(), E>,
    {
        if t_end < self.clock {
            return Err(RunError::Sim(SimError::HorizonInPast {
                horizon: t_end,
                clock: self.clock,
            }));
        }
        let mut processed = 0u64;
        while let Some(entry) = self.heap.peek() {
            if entry.0.fire_at > t_end {
                break;
            }
            let event = self.heap.pop().expect("peeked").0;
            if let Some((prev_at, prev_seq)) = self.last_dequeued {
                if (event.fire_at, event.seq) <= (prev_at, prev_seq) {
                    return Err(RunError::Sim(SimError::OrderViolation {
                        at: event.fire_at,
                        seq: event.seq,
                        prev_at,
                        prev_seq,
                    }));
                }
            }
            self.last_dequeued = Some((event.fire_at, event.seq));
            self.clock = event.fire_at;
            if let Some(sink) = self.trace.as_mut() {
                let line = format!(
                    "t={} seq={} target={} kind={}\n",
                    event.fire_at.micros(),
                    event.seq,
                    self.names[event.target.index()],
                    event.payload.kind()
                );
                sink.write_all(line.as_bytes()).map_err(RunError::Trace)?;
            }
            processed += 1;
            self.processed_total += 1;
            handler(self, event).map_err(RunError::Handler)?;
        }
        self.clock = t_end;
        Ok(processed)
    }
}

impl<P: EventKind> Default for EventLoop<P> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Sim(SimError),
    #[error("handler error: {0}")]
    Handler(E),
    #[error("trace sink error: {0}")]
    Trace(std::io::Error),
}

/// Seeded random stream, one per component.
pub type RngStream = ChaCha12Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives the independent stream for `(seed, stream_id)`. The same pair
/// always yields the identical draw sequence; distinct stream ids select
/// distinct ChaCha streams under the same key.
pub fn derive_rng(seed: u64, stream_id: &str) -> RngStream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(stream_id.as_bytes()));
    rng
}
