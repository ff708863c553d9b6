//! Masked data modeling inputs: tokenizers, mask planning and batches.

mod batch;
mod example;
mod masking;
mod raster;
mod tokenizer;
mod visual;

pub use batch::{compose_batch, Batch, Quotas, SampleRef, StreamSizes};
pub use example::{mask_example, MaskedExample, MaskingConfig, Targets};
pub use masking::{
    apply_mask, mask_count, plan_block_mask, plan_text_mask, BlockMask, MaskPlan, MaskedSequence, Rect,
    SequenceKind, TokenSequence, IMAGE_CLS, IMAGE_MASK, MIN_ASPECT, MIN_BLOCK_AREA,
};
pub use raster::RasterImage;
pub use tokenizer::{Vocab, CLS_ID, EMPTY_ID, FIRST_WORD_ID, MASK_ID, PAD_ID, SEP_ID};
pub use visual::{visual_tokenize, VisualCodebook, DEFAULT_PROJECTION_DIM};
