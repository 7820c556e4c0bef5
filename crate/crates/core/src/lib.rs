//! Allocation-only core of the iEnvironment platform.
//!
//! Everything in this crate is a pure function of its inputs: schema
//! validation and canonical record digests, the attribute predicate language,
//! role-based access evaluation, working-set overlay and three-way merge
//! algebra, provenance lineage traversal, scheduling rules, and the daily
//! water-balance model. Storage, IO, HTTP and threading live in the `ienv`
//! crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod access;
pub mod canonical;
pub mod catalog;
pub mod events;
pub mod geo;
pub mod ids;
pub mod jobs;
pub mod lineage;
pub mod overlay;
pub mod predicate;
pub mod schema;
pub mod time;
pub mod watershed;

pub use canonical::Digest;
pub use geo::{GeoPoint, GeoRegion};
pub use ids::*;
pub use schema::{FieldDef, FieldKind, Record, Schema, Value};
pub use time::Timestamp;
