//! Grammar-guided neuroevolution of convolutional networks that are scored on
//! both clean accuracy and adversarial accuracy.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! the grammar and genotype machinery, the outer-level genome, network
//! compilation, a small differentiable runtime, gradient-based attacks, the
//! fitness function and the (1+λ) evolutionary strategy. File formats, the
//! CIFAR-10 loader and the command line live in the `evonet` crate.
//!
//! Layout:
//!
//! - [`grammar`]: grammar text format, DSGE genotypes, derivation and mutation
//! - [`genome`]: modules, units, connections, validity and dead-end repair
//! - [`netbuilder`]: layer descriptors, block expansion, shape inference
//! - [`engine`]: tensors, layers, forward/backward, optimizers, training
//! - [`attacks`]: FGSM/FGM, PGD, APGD, DLR losses and the APGD ensemble
//! - [`fitness`]: clean/adversarial accuracy, F-beta, warm-up, ill-fitted checks
//! - [`data`]: datasets, splits, synthetic data and augmentation
//! - [`evolution`]: mutation operators, selection and the generation loop
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod attacks;
pub mod data;
pub mod engine;
pub mod evolution;
pub mod fitness;
pub mod genome;
pub mod grammar;
pub mod netbuilder;
pub mod scalar;
pub mod tensor;

mod hash;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Random stream used throughout the crate. Seedable, serializable and
/// identical across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Grammar of the full search space (outer structure in [`genome::neronet_modules`]).
pub const NERONET_GRAMMAR: &str = include_str!("../assets/neronet.grammar");

/// Reduced grammar sized for 8x8 synthetic images and CPU-only runs.
pub const DESK_GRAMMAR: &str = include_str!("../assets/desk.grammar");
