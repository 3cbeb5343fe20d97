//! Everything between encoder outputs and text: tokenizer, LoRA, the decoder
//! LM, the modality connector and dynamic ECG input assembly.

pub mod lm;
pub mod lora;
mod model;
pub mod tokenizer;

pub use lm::{DecoderLm, LanguageModel, LmConfig};
pub use lora::{lora_apply, AdapterTarget, LoraAdapter, LoraConfig, LoraLinear, Projection};
pub use model::{
    blank_record, count_placeholders, l2_normalize, with_placeholders, AssembledPrompt, ChatMessage,
    Connector, Decoding, EcgChatModel, EcgTokenMode, Layout, ModelConfig, Precision, Segment,
    TrainExample, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use tokenizer::{Role, Tokenizer, ECG_END, ECG_PLACEHOLDER, ECG_START};
