// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "two/autograd.hpp"
#include "two/datamodel.hpp"

namespace two {

// Word-level tokenizer: ASCII lowercased, split on non-alphanumeric bytes.
// Bytes >= 0x80 count as word characters so multibyte text survives intact.
std::vector<std::string> word_tokenize(const std::string& text);

struct Vocabulary {
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int UNK = 3;
    static constexpr int SEP_Q = 4;
    static constexpr int SEP_V = 5;
    static constexpr int SEP_M = 6;
    static constexpr int SEP_T = 7;
    static constexpr int SEP_P = 8;
    static constexpr int num_specials = 9;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    int size() const { return static_cast<int>(id_to_token.size()); }
    int lookup(const std::string& token) const;
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;  // drops special tokens

    // Frequency-ranked vocabulary (ties lexicographic), capped at max_size.
    static Vocabulary build(const std::vector<std::string>& texts, int max_size);
    static Vocabulary from_tokens(std::vector<std::string> tokens);
};

struct ModelConfig {
    int h = 32;      // textual hidden size
    int h_mm = 32;   // multimodal hidden size
    int h_mid = -1;  // bridge hidden width; -1 means h
    int L_q = 16;
    int L_v = 36;
    int L_t = 250;
    int k = 5;
    int feat_dim = 2048;
    int heads = 2;
    int mm_layers = 1;
    int txt_layers = 1;
    int dec_layers = 1;
    int max_answer_len = 8;
    bool disable_mm_encoder = false;
    bool disable_txt_encoder = false;
    bool include_implicit_textual = true;
    bool include_implicit_multimodal = true;
    std::string loss_mode = "standard";  // "standard" or "vocab_scaled"
    uint64_t seed = 0;

    int bridge_mid() const { return h_mid > 0 ? h_mid : h; }
    void validate() const;
};

struct MultimodalStates {
    ag::Value lang;    // L_q x h_mm
    ag::Value vision;  // L_v x h_mm
};

enum class RowKind { mm_lang, mm_vision, textual };

struct RowOrigin {
    RowKind kind;
    int passage;  // block index the row belongs to
};

struct HybridSequence {
    ag::Value embeddings;  // rows x h
    std::vector<RowOrigin> segments;
};

struct AnswerDistribution {
    ag::Value probs;   // steps x |V|, rows sum to 1
    ag::Value logits;  // steps x |V|
    int steps = 0;
};

// Token streams for one sample, assembled under the stage rules. field_texts
// keeps the pre-tokenization rendering of each field for invariant checks.
struct AssembledInput {
    std::vector<int> question_ids;            // length L_q
    std::vector<std::vector<int>> passages;   // k streams, each length L_t
    std::map<std::string, std::string> field_texts;
    int truncated_streams = 0;
};

struct AssemblyOptions {
    bool include_implicit_textual = true;
    bool include_implicit_multimodal = true;
};

AssembledInput assemble_input(const Sample& sample, const ModelConfig& cfg,
                              const Vocabulary& vocab, const AssemblyOptions& opts);

class Model {
public:
    Model(ModelConfig cfg, Vocabulary vocab);

    // Parameters are shared_ptr graph leaves; a shallow copy would alias
    // them across "independent" models, so copying is explicit via clone().
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model clone() const;

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& mutable_config() { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::map<std::string, ag::Value>& params() { return params_; }
    const std::map<std::string, ag::Value>& params() const { return params_; }
    void zero_grads();

    MultimodalStates encode_multimodal(const std::vector<int>& question_ids,
                                       const ImageFeatures& features) const;
    ag::Value project_multimodal(const MultimodalStates& states) const;
    ag::Value encode_textual(const std::vector<int>& stream_ids) const;
    HybridSequence fuse_sequences(const ag::Value& H,
                                  const std::vector<ag::Value>& passage_states) const;
    AnswerDistribution decode_answer(const HybridSequence& S, const std::vector<int>& gold) const;
    ag::Value compute_loss(const AnswerDistribution& dist, const std::vector<int>& gold) const;
    std::string generate(const HybridSequence& S, int max_len) const;

    HybridSequence forward_states(const AssembledInput& input, const ImageFeatures& features) const;
    // gold = answer token ids without BOS/EOS; both are added internally
    ag::Value forward_loss(const AssembledInput& input, const ImageFeatures& features,
                           const std::vector<int>& gold_answer) const;
    std::string predict(const AssembledInput& input, const ImageFeatures& features) const;

    std::vector<int> encode_answer(const std::string& answer) const;

private:
    ModelConfig cfg_;
    Vocabulary vocab_;
    std::map<std::string, ag::Value> params_;

    ag::Value p(const std::string& name) const;
    ag::Value attention(const std::string& prefix, const ag::Value& q_input,
                        const ag::Value& kv_input, int hidden, bool causal) const;
    ag::Value attn_ln_block(const std::string& prefix, const ag::Value& x, const ag::Value& kv,
                            int hidden, bool causal) const;
    ag::Value ffn_ln_block(const std::string& prefix, const ag::Value& x) const;
    AnswerDistribution decode_steps(const HybridSequence& S,
                                    const std::vector<int>& input_ids) const;
};

// Checkpoint payload beyond the raw model: optimizer moments and progress.
struct CheckpointExtra {
    std::map<std::string, Matrix> opt_m;
    std::map<std::string, Matrix> opt_v;
    int64_t opt_t = 0;
    int64_t step = 0;
    std::string stage;  // "pretrain", "finetune" or "" for bare models
    std::string meta_json;
};

void save_checkpoint(const Model& model, const CheckpointExtra& extra, const std::string& path);

struct LoadedCheckpoint {
    Model model;
    CheckpointExtra extra;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace two
