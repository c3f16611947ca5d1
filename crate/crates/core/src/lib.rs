// SPDX-License-Identifier: Apache-2.0

//! Behavioral model of tweak-based memory encryption and an enclave
//! architecture built on top of it.
//!
//! * [`tweak`]: software tweak layout, composition and page-type rules.
//! * [`mee`]: the memory encryption engine with per-line replay counters.
//! * [`cache`]: the tweak-tagged cache plus offline sizing analytics.
//! * [`machine`]: a hart, its CSRs, page tables and the access pipeline.
//! * [`monitor`]: the M-mode security monitor.
//! * [`scenario`]: declarative attack scenarios and their runner.

pub mod cache;
pub mod crypto;
pub mod csr;
pub mod machine;
pub mod mee;
pub mod monitor;
pub mod scenario;
pub mod tweak;
