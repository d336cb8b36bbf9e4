//! Desk-scale scene text editing with self-constructed prompts.
//!
//! The pipeline edits the text inside a masked region of an image while
//! preserving the original text's color and the surrounding background:
//!
//! 1. [`imaging`] builds the masked image and the style crop, [`glyphs`]
//!    renders the target text into a white-on-black glyph map.
//! 2. [`encoders`] lifts the 8-channel composite into a latent grid with a
//!    frozen orthogonal patch codec and embeds the text prompts.
//! 3. [`backbone`] is a miniature dual-stream/single-stream diffusion
//!    transformer predicting a velocity field over the latent.
//! 4. [`flow`] provides rectified-flow interpolation, the pretraining and
//!    cooldown objectives, and the Euler sampler.
//! 5. [`dataset`], [`metrics`] and [`trainer`] supply the synthetic scene
//!    generator, the Seq. ACC / NED / Fréchet metrics, the two-stage
//!    training loop and the incremental multilingual protocol.
//!
//! Everything is seeded and deterministic: same inputs, same bytes out.

pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod flow;
pub mod glyphs;
pub mod imaging;
pub mod metrics;
pub mod tensor;
pub mod trainer;
