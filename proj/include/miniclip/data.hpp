#pragma once

// Dataset ingestion: JSONL manifests, binary PPM images, whitespace/punct
// tokenization with a deterministic vocabulary, the caption filters, the
// synthetic paired-data generator, and epoch batching.

#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "miniclip/augment.hpp"
#include "miniclip/common.hpp"

namespace miniclip {

struct ManifestRecord {
    std::string image_path;     // relative to the manifest's directory
    std::vector<float> pixels;  // inline CHW alternative used by tests
    std::string caption;
    int label = -1;  // optional class id for evaluation
};

struct Manifest {
    std::vector<ManifestRecord> records;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

// Binary 8-bit PPM (P6); values quantized to bytes on save.
Image load_ppm(const std::string& path);
void save_ppm(const Image& image, const std::string& path);

struct Vocab {
    std::vector<std::string> id_to_token;  // slot i = id i; slots 0..2 are specials
    std::unordered_map<std::string, int> token_to_id;

    int size() const { return static_cast<int>(id_to_token.size()); }
    std::optional<int> lookup(const std::string& token) const;

    static Vocab build(const std::vector<std::string>& captions, int min_count);
    static Vocab from_tokens(const std::vector<std::string>& corpus_tokens_in_id_order);
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);
};

// Lowercased alphanumeric word split; punctuation separates.
std::vector<std::string> split_words(const std::string& text);

struct FilterDecision {
    bool keep = true;
    std::string reason;  // "no_caption" | "english_ratio" | "single_pos"
};

// The caption filters: non-empty, lexicon-word ratio >= 0.8, and more than
// one part of speech among fully tagged captions.
FilterDecision filter_caption(const std::string& caption, const std::unordered_set<std::string>& english_words,
                              const std::unordered_map<std::string, std::string>& tag_map);

// In-vocabulary content ids; unknown words are dropped.
std::vector<int> content_ids(const std::string& caption, const Vocab& vocab);

struct Tokenized {
    std::vector<int> ids;  // length max_len: content, EOS, then padding
    int length = 0;        // slots holding content + EOS
    bool truncated = false;
};

// Appends EOS and pads to max_len; overlong input keeps the first
// max_len - 1 content tokens and flags the truncation.
Tokenized pad_sequence(const std::vector<int>& content, int max_len);
Tokenized tokenize(const std::string& caption, const Vocab& vocab, int max_len);
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

// word<TAB>syn1,syn2,... resolved against a vocabulary.
SynonymLexicon load_lexicon(const std::string& path, const Vocab& vocab);
std::unordered_map<std::string, std::string> load_tag_map(const std::string& path);
std::unordered_set<std::string> load_word_set(const std::string& path);
std::vector<std::string> load_lines(const std::string& path);

// Epoch-seeded shuffle with the trailing partial batch dropped.
std::vector<std::vector<int>> make_batches(int n_records, int batch_size, int epoch, uint64_t seed);

struct GenSpec {
    int concepts = 8;
    int paraphrases_per_concept = 4;
    int pairs_per_concept = 250;
    int image_size = 32;
    double noise_std = 0.05;
    uint64_t seed = 0;
    int eval_per_concept = 25;

    static GenSpec from_json_file(const std::string& path);
    void validate() const;
};

// Renders colored-shape images with paraphrased captions so that genuinely
// similar captions exist across records, and ships the synonym lexicon, tag
// map, english word list, label names and prompt templates to match.
void synth_generate(const GenSpec& spec, const std::string& out_dir);

// Everything training and evaluation need, decoded and tokenized.
struct Dataset {
    Manifest manifest;
    std::vector<Image> images;
    std::vector<std::vector<int>> tokens;  // content ids per record
    Vocab vocab;
    SynonymLexicon lexicon;
    std::vector<std::string> label_names;
    std::vector<std::string> prompts;
};

Dataset load_dataset(const std::string& data_dir, const std::string& manifest_name, int image_size,
                     int vocab_min_count = 1, const Vocab* fixed_vocab = nullptr);

}  // namespace miniclip
