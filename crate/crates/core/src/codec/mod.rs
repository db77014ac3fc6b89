//! Gradient autoencoders and the payload wire format.

pub mod autoencoder;
pub mod payload;

pub use autoencoder::{
    ae_train_step_ps, ae_train_step_rar, average_codes, choose_code_node, code_length, decode_ps,
    decode_rar, encode_common, AeGradients, AeLosses, AeOptimizer, AeVariant, AutoencoderParams,
    CommonCode, PsLossWeights, CODE_CHANNELS,
};
pub use payload::{
    pack_payload, payload_sizes, unpack_bundle, unpack_payload, unpack_payload_prefix, CompressedPayload,
    PayloadKind, PayloadSizes, ValueWidth,
};
