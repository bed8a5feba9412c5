//! Transformer image captioning: tensors with reverse-mode gradients, caption
//! preprocessing, image features, an encoder-decoder caption model, greedy and
//! beam decoding, caption metrics, ensemble voting and training.

pub mod numerics;
pub mod params;
pub mod textpipe;
pub mod transformer;
pub mod vision;

mod bytes;
pub mod decode;
pub mod ensemble;
pub mod metrics;
pub mod train;
