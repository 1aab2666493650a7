//! Offline multi-sensor fusion for SLAM ground truth: joint calibration of a
//! motion-capture system, an auxiliary IMU and a device under test, plus a
//! continuous-time trajectory estimate, simulator and metric suite.

pub mod config;
pub mod factors;
pub mod geometry;
pub mod init;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod sim;
pub mod solver;
pub mod spline;
pub mod sync;

/// Keeps the guide's code snippets compiling and passing: every chapter of
/// `book/` is attached as module documentation here, so `cargo test` runs
/// its examples as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/index.md")]
    mod index {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/splines.md")]
    mod splines {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/synchronization.md")]
    mod synchronization {}
    #[doc = include_str!("../../../book/src/initialization.md")]
    mod initialization {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
