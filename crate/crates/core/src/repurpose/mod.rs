//! Downstream layouts: fusion classifiers, dual-encoder retrieval,
//! classification by retrieval and masked-finetuned captioning.

mod caption;
mod dual;
mod finetune;
mod heads;

pub use caption::{
    caption_generate, caption_loss, caption_loss_embedded, greedy_decode, next_token_logprobs, plan_caption_mask,
    CaptionMasking, Generated,
};
pub use dual::{
    classify_by_retrieval, dot, dual_embed, dual_encode, embed_image, embed_text, label_scores, recall_at_k,
    retrieve, Hit, IndexEntry, RecallReport, RetrievalIndex,
};
pub use finetune::{
    caption_finetune_step, finetune_caption, finetune_classify, finetune_fusion, finetune_two_pair,
    intermediate_finetune_contrastive, run_finetune, BatchRefs, FinetuneConfig, FinetuneMetrics, FinetuneOutcome,
    TwoPairInput, MAX_LOGIT_SCALE,
};
pub use heads::{
    argmax, fusion_classify, fusion_logits, fusion_pooled, softmax_row, two_pair_classify, two_pair_logits,
    FusionHead,
};
