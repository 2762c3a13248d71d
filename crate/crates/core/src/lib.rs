//! Look-alike glyph screening.
//!
//! The pipeline enhances grayscale glyph images ([`imageops`]), learns two
//! embedding spaces with a small reverse-mode autodiff engine ([`tensor`]):
//! a contrastive Siamese encoder ([`simsiam`]) and a supervised RepVGG
//! classifier ([`supervised`], [`repvgg`]), then ranks stored glyphs by a
//! convex blend of the two cosine similarities ([`index`]). Dataset
//! ingestion, the synthetic glyph generator and retrieval metrics live in
//! [`data`].

pub mod data;
pub mod error;
pub mod imageops;
pub mod index;
pub mod repvgg;
pub mod rng;
pub mod simsiam;
pub mod supervised;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
