//! Byte tokenizer, sample records, synthetic task generators and batching.

pub mod alignment;
pub mod batch;
pub mod corpus;
pub mod knowledge;
pub mod sample;
pub mod tokenizer;

pub use alignment::{format_spans, gen_alignment_task, parse_spans, Span, NONE_TARGET};
pub use corpus::{build_corpus, Corpus, CorpusSizes};
pub use batch::{build_batch, encode_prompt, encode_sample, Batch, Packed};
pub use knowledge::{gen_knowledge_task, Fact, FactTable, KnowledgeTask};
pub use sample::{load_jsonl, option_letter, parse_jsonl, write_jsonl, Sample, TaskTag};
pub use tokenizer::{detokenize, tokenize, Decoded, Tokenizer, BOS, EOS, PAD, SEP, VOCAB_SIZE};
