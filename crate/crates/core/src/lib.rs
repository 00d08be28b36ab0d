//! Core algorithms for test-time-trained dense point tracking.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! needs only `alloc`: pixel/feature-grid geometry, optical-flow tracklet
//! chaining with cycle checks, best-buddy mining and confidence weighting,
//! the trajectory-agreement visibility rule, benchmark metrics, and the small
//! numeric helpers shared by the trainer. IO, neural networks and the CLI live
//! in the `vidtrack` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod buddies;
pub mod checksum;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod schedule;
pub mod stats;
pub mod tracking;
pub mod visibility;

pub use error::{Error, Result};
pub use geometry::{PatchGrid, Point2};
pub use raster::{FeatureGrid, FlowField, Image};
pub use tracking::{PointTracker, TrackRequest};
