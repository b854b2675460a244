//! Time-scale augmented pretraining (TSAP) for population transformers.
//!
//! The crate covers the full experimental loop at desk scale: a synthetic
//! multichannel corpus with event-locked responses ([`datagen`]), a frozen
//! per-channel temporal featurizer ([`encoder`]), the population transformer
//! and its discrimination pretext task ([`popt`]), the pretrain / finetune /
//! cross-evaluation protocol ([`pipeline`]) and the metrics behind it
//! ([`analysis`]). Learned components run on the small autodiff engine in
//! [`numerics`].

pub mod numerics;
pub mod seed;
pub mod datagen;
pub mod encoder;
pub mod popt;
pub mod analysis;
pub mod pipeline;
