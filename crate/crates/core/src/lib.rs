//! Dispersed-pixel backdoor trigger lab.
//!
//! End-to-end tooling for studying a low-magnitude, spatially dispersed
//! backdoor trigger on image classifiers: trigger synthesis from a keyed
//! CSPRNG stream, dataset poisoning, from-scratch MLP training, the
//! closed-form magnitude/recognition-rate theory with a Monte-Carlo
//! Perceptron oracle, and implementations of the detection and mitigation
//! defenses the trigger is evaluated against (STRIP, spectral signatures,
//! activation clustering, spatial smoothing, image transforms, neuron
//! pruning, fine-tuning).

pub mod analysis;
pub mod cli;
pub mod data;
pub mod defense;
pub mod imageops;
pub mod metrics;
pub mod nn;
pub mod poison;
pub mod trigger;
