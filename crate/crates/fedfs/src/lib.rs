//! Deterministic desk-scale simulator of federated personalized
//! representation learning with intra-subject self-supervision.
//!
//! The library models a federation in which every client owns samples of
//! exactly one identity and trains two small encoders — a shared *global*
//! model aggregated by the server with FedAvg and a *personalized* model
//! that never leaves the client — against a frozen pre-trained reference
//! encoder. The local objective combines an intra-subject soft-label loss
//! built from adaptive dot-product scores with a cosine regularizer between
//! the two models' pre-final activations.
//!
//! Everything runs in one process on synthetic identity data, seeded end to
//! end: identical configs produce byte-identical metrics regardless of the
//! parallelism degree.
//!
//! ```
//! use fedfs::tensor::{grad_check, GradTape, Tensor};
//!
//! // the tape gradient of Σ x² matches central differences
//! let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
//! let err = grad_check(|tape, v| Ok(tape.sum_squares(v)), &x, 1e-5).unwrap();
//! assert!(err < 1e-6);
//! ```

pub mod client;
pub mod convergence;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
