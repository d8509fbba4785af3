//! Query learning for sequence models whose next-token logits have low rank.
//!
//! A model `M` over sequences in `Σ^T` has logit rank `d` when, for every split
//! of a sequence into a history `h` and a future `f`, the matrix of
//! mean-centered next-token logits indexed by (history, future + next token)
//! has rank at most `d`. Input-switched affine networks ([`isan::IsanModel`])
//! realize exactly the models of a given logit rank and serve here both as
//! ground-truth generators and as the target class.
//!
//! The pipeline:
//!
//! * [`isan`] — affine generator models: synthesis, sampling, serialization.
//! * [`oracle`] — logit oracles over a model (exact, noisy, empirical,
//!   temperature-scaled), query traces, and a rank certificate on traces.
//! * [`spanner`] — approximate barycentric spanners of sampled logit rows.
//! * [`lp`] — the per-prefix feasibility program tying consecutive steps
//!   together, solved by a dense two-phase simplex.
//! * [`learner`] — the epoch loop: build spanners, test sampled prefixes for
//!   feasibility and discrepancy, grow the tested future sets, and emit a
//!   [`learner::LearnedModel`].
//! * [`sampler`] — autoregressive sampling from a learned model.
//! * [`eval`] — brute-force distributions, total variation, logit-matrix rank
//!   profiles.
//! * [`km`] — reduction from learning Fourier-sparse boolean functions to the
//!   sequence-model learner.
//!
//! Everything is deterministic given the configured seeds: reruns with the
//! same configuration reproduce outputs bit-exactly.

pub mod eval;
pub mod isan;
pub mod km;
pub mod learner;
pub mod lp;
pub mod oracle;
pub mod prob;
pub mod sampler;
pub mod spanner;
