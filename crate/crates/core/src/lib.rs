//! Compressive adversarial privacy.
//!
//! A data holder releases a distorted copy `X̃` of a feature matrix `X` so that
//! an attacker inferring private labels `Y` from `X̃` does as badly as possible,
//! while the distortion between `X` and `X̃` stays inside a budget `γ`.
//!
//! Three release mechanisms are provided:
//!
//! * [`linear_game`]: continuous labels, least-squares attacker. The holder's
//!   compress-and-reconstruct map is reparametrized as a PSD matrix `M` and
//!   found by a nuclear-norm relaxed SDP, with `β` tuned until `M` hits a
//!   target rank.
//! * [`logistic_game`]: binary labels, logistic attacker, alternating
//!   attacker fits and projected holder ascent with iterate averaging.
//! * [`neural_game`]: binary labels, encoder–decoder holder versus an MLP
//!   attacker trained adversarially under a penalized distortion budget.
//!
//! [`privmetrics`] audits releases with kNN (Kozachenko–Leonenko) mutual
//! information estimates, [`dataset`] supplies synthetic data and splits, and
//! [`powerfeat`] turns four weeks of half-hourly smart-meter readings into
//! 23 consumption features.

pub mod dataset;
pub mod error;
pub mod linalg;
pub mod linear_game;
pub mod logistic_game;
pub mod neural_game;
pub mod numopt;
pub mod powerfeat;
pub mod privmetrics;
pub mod seed;

pub use error::{Error, Result};
