//! Co-simulation of a feedback-controlled physical process and the
//! programmable switch fabric that carries its traffic.
//!
//! The crate is organized around a deterministic event loop ([`sim`])
//! driving four cooperating subsystems: the physical plant and its feedback
//! controller ([`plant`], [`control`]), the SCADA framing they speak
//! ([`scada`]), the simulated switch fabric ([`net`]), and the programmable
//! network controller that watches it ([`pnctrl`], [`paths`], [`sysid`]).
//! Attack injectors ([`adversary`]) compromise single switches or flood the
//! fabric; the scenario harness ([`scenario`], [`world`], [`metrics`],
//! [`harness`]) runs seeded experiments and writes replayable metrics.

pub mod adversary;
pub mod control;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod paths;
pub mod plant;
pub mod pnctrl;
pub mod scada;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod sysid;
pub mod world;

pub use control::{AlertKind, AlertSignal, Estimate, Supervisor};
pub use net::{FlowRule, Packet, Proto, Topology};
pub use plant::{PlantState, StateSpaceModel};
pub use pnctrl::{FlowKey, PathTable, PnController, TrafficClass, Verdict};
pub use scada::{RegisterCodec, ScadaFrame};
pub use scenario::ScenarioConfig;
pub use sim::{EventLoop, RngStream, SimTime};







