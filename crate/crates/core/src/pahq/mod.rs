// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head precision allocation, mixed-precision assembly and the
//! dual-precision weight store.

pub mod assembly;
mod policy;
mod prefetch;
pub mod store;

pub use assembly::{concat_heads, mixed_assembly, split_heads};
pub use policy::{policy_for_edge, target_of, PrecisionPolicy, Target};
pub use prefetch::{make_prefetch_plan, PrefetchEntry, PrefetchPlan};
pub use store::{build_store, LoadTicket, Part, SlotState, StoreTelemetry, WeightStore};
