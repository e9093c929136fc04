//! The miniature promptable segmenter: image encoder, prompt encoder,
//! two-way decoder, output heads, and the assembled teacher model.

pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod layers;
pub mod prompt_enc;
pub mod teacher;

pub use decoder::{DecoderOutput, DecoderParams};
pub use encoder::{EncoderParams, ImageEmbedding, EMBED_DIM, IMAGE_SIZE};
pub use heads::{predict_mask, MaskMlpParams, UpsampleHeadParams, MASK_CHANNELS};
pub use layers::Binder;
pub use prompt_enc::PromptEncoderParams;
pub use teacher::{images_to_tensor, masks_to_tensor, TeacherBound, TeacherForward, TeacherParams};
