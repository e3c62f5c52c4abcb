//! 5-DOF needle tracking from cross-sectional OCT B-scans.
//!
//! A surgical needle is modelled as an ideal cylinder. Each OCT B-scan slices
//! that cylinder in a plane, producing an elliptical cross-section whose shape
//! encodes the needle orientation. The crates's pipeline stages are:
//!
//! 1. **geometry** – scan-plane / tool-axis primitives and the exact
//!    cylinder–plane ellipse relations (forward model and inverse constraints).
//! 2. **synth** – ground-truthed synthetic B-scan sequences: needle arc,
//!    shadow, tissue layer, speckle noise, scripted motion, scan patterns.
//! 3. **detect** – per-B-scan ellipse detection: per-column candidates,
//!    robust tissue fit, morphological filtering, RANSAC ellipse fit and
//!    geometric-distance refinement.
//! 4. **ekf** – a latency-aware extended Kalman filter over a 10-dimensional
//!    needle state with a nonlinear plane re-basing transition and analytic
//!    Jacobians.
//! 5. **tracker** – sequence-level orchestration, the two-frame line-fit
//!    baseline, target-surface reconstruction and injection-point guidance.

pub mod detect;
pub mod ekf;
pub mod geometry;
pub mod synth;
pub mod tracker;

pub use geometry::{EllipseParams, ScanPlane, ToolAxis, Vec3};
pub use synth::BScan;
