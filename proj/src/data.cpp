#include "miniclip/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "miniclip/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace miniclip {

// ---------------------------------------------------------------------------
// Manifest

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path);
    Manifest m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("manifest " + path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        ManifestRecord r;
        if (j.contains("image_path")) r.image_path = j.at("image_path").get<std::string>();
        if (j.contains("pixels")) r.pixels = j.at("pixels").get<std::vector<float>>();
        if (r.image_path.empty() && r.pixels.empty())
            throw DataError("manifest line " + std::to_string(lineno) + " has neither image_path nor pixels");
        r.caption = j.value("caption", std::string());
        r.label = j.value("label", -1);
        m.records.push_back(std::move(r));
    }
    return m;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path);
    for (const auto& r : manifest.records) {
        json j;
        if (!r.image_path.empty()) j["image_path"] = r.image_path;
        if (!r.pixels.empty()) j["pixels"] = r.pixels;
        j["caption"] = r.caption;
        if (r.label >= 0) j["label"] = r.label;
        out << j.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// PPM

Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw DataError(path + " is not a binary PPM (P6) file");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw DataError(path + " has an unsupported PPM header");
    in.get();  // single whitespace after the header
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw DataError(path + " is truncated");
    Image img{3, h, w, std::vector<float>(raw.size())};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

void save_ppm(const Image& image, const std::string& path) {
    if (image.channels != 3) throw DataError("PPM output requires 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path);
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<size_t>(image.width) * image.height * 3);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
                raw[(static_cast<size_t>(y) * image.width + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::optional<int> Vocab::lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    if (it == token_to_id.end()) return std::nullopt;
    return it->second;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& corpus_tokens_in_id_order) {
    Vocab v;
    v.id_to_token = {"<pad>", "<eos>", "<mask>"};
    for (const auto& t : corpus_tokens_in_id_order) v.id_to_token.push_back(t);
    for (size_t i = 0; i < v.id_to_token.size(); ++i) v.token_to_id[v.id_to_token[i]] = static_cast<int>(i);
    return v;
}

Vocab Vocab::build(const std::vector<std::string>& captions, int min_count) {
    std::map<std::string, int64_t> counts;  // ordered map fixes the lexicographic tie order
    for (const auto& caption : captions)
        for (auto& w : split_words(caption)) ++counts[w];
    std::vector<std::pair<std::string, int64_t>> items(counts.begin(), counts.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> kept;
    for (auto& [tok, cnt] : items)
        if (cnt >= min_count) kept.push_back(tok);
    Vocab v = from_tokens(kept);
    if (v.size() < 4) throw DataError("vocabulary collapsed to specials only; corpus too small");
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocab " + path);
    for (int i = kNumSpecialIds; i < size(); ++i) out << id_to_token[i] << '\n';
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) tokens.push_back(line);
    return from_tokens(tokens);
}

std::vector<int> content_ids(const std::string& caption, const Vocab& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(caption))
        if (auto id = vocab.lookup(w)) ids.push_back(*id);
    return ids;
}

Tokenized pad_sequence(const std::vector<int>& content, int max_len) {
    if (max_len < 2) throw ConfigError("context length must be at least 2");
    Tokenized t;
    t.truncated = static_cast<int>(content.size()) > max_len - 1;
    const int keep = std::min<int>(static_cast<int>(content.size()), max_len - 1);
    t.ids.assign(max_len, kPadId);
    for (int i = 0; i < keep; ++i) t.ids[i] = content[i];
    t.ids[keep] = kEosId;
    t.length = keep + 1;
    return t;
}

Tokenized tokenize(const std::string& caption, const Vocab& vocab, int max_len) {
    return pad_sequence(content_ids(caption, vocab), max_len);
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id < kNumSpecialIds) continue;
        if (id >= vocab.size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
        if (!out.empty()) out.push_back(' ');
        out += vocab.id_to_token[id];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Caption filters

FilterDecision filter_caption(const std::string& caption, const std::unordered_set<std::string>& english_words,
                              const std::unordered_map<std::string, std::string>& tag_map) {
    const auto words = split_words(caption);
    if (words.empty()) return {false, "no_caption"};
    int known = 0;
    for (const auto& w : words)
        if (english_words.count(w)) ++known;
    if (static_cast<double>(known) / static_cast<double>(words.size()) < 0.8) return {false, "english_ratio"};

    std::unordered_set<std::string> tags;
    bool all_tagged = true;
    for (const auto& w : words) {
        auto it = tag_map.find(w);
        if (it == tag_map.end()) {
            all_tagged = false;
            break;
        }
        tags.insert(it->second);
    }
    if (all_tagged && tags.size() <= 1) return {false, "single_pos"};
    return {true, ""};
}

// ---------------------------------------------------------------------------
// Sidecar files

std::vector<std::string> load_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

SynonymLexicon load_lexicon(const std::string& path, const Vocab& vocab) {
    SynonymLexicon lex;
    for (const auto& line : load_lines(path)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("lexicon line lacks a tab: " + line);
        const auto key = vocab.lookup(line.substr(0, tab));
        if (!key) continue;
        std::vector<int> syns;
        std::stringstream ss(line.substr(tab + 1));
        std::string syn;
        while (std::getline(ss, syn, ','))
            if (auto id = vocab.lookup(syn)) syns.push_back(*id);
        if (!syns.empty()) lex[*key] = std::move(syns);
    }
    return lex;
}

std::unordered_map<std::string, std::string> load_tag_map(const std::string& path) {
    std::unordered_map<std::string, std::string> tags;
    for (const auto& line : load_lines(path)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("tag map line lacks a tab: " + line);
        tags[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return tags;
}

std::unordered_set<std::string> load_word_set(const std::string& path) {
    std::unordered_set<std::string> words;
    for (const auto& line : load_lines(path)) words.insert(line);
    return words;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::vector<int>> make_batches(int n_records, int batch_size, int epoch, uint64_t seed) {
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    std::vector<int> order(n_records);
    for (int i = 0; i < n_records; ++i) order[i] = i;
    Rng rng = derive_rng(seed, 0xba7c4e5ULL, static_cast<uint64_t>(epoch));
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start + batch_size <= n_records; start += batch_size)
        batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
    return batches;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct WordGroup {
    const char* name;
    const char* syn1;
    const char* syn2;
};

struct ColorDef {
    WordGroup words;
    float r, g, b;
};

constexpr ColorDef kColors[] = {
    {{"red", "crimson", "scarlet"}, 0.85f, 0.10f, 0.10f},
    {{"blue", "azure", "cobalt"}, 0.10f, 0.20f, 0.85f},
    {{"green", "emerald", "jade"}, 0.10f, 0.75f, 0.20f},
    {{"yellow", "golden", "amber"}, 0.90f, 0.85f, 0.10f},
    {{"purple", "violet", "mauve"}, 0.55f, 0.15f, 0.70f},
    {{"orange", "tangerine", "apricot"}, 0.90f, 0.50f, 0.10f},
    {{"cyan", "teal", "turquoise"}, 0.10f, 0.80f, 0.80f},
    {{"white", "pale", "ivory"}, 0.92f, 0.92f, 0.92f},
    {{"pink", "rose", "salmon"}, 0.95f, 0.50f, 0.65f},
    {{"gray", "ashen", "slate"}, 0.55f, 0.55f, 0.55f},
    {{"brown", "chocolate", "umber"}, 0.55f, 0.35f, 0.15f},
    {{"lime", "chartreuse", "neon"}, 0.60f, 0.95f, 0.20f},
};

constexpr WordGroup kShapes[] = {
    {"circle", "disc", "orb"},   {"square", "box", "block"},  {"triangle", "wedge", "spike"},
    {"cross", "plus", "marker"}, {"diamond", "rhombus", "gem"}, {"ring", "hoop", "loop"},
    {"bar", "stripe", "band"},   {"dot", "spot", "speck"},     {"circle", "disc", "orb"},
    {"square", "box", "block"},  {"triangle", "wedge", "spike"}, {"cross", "plus", "marker"},
};

constexpr int kMaxConcepts = 12;

bool inside_shape(int shape, float dx, float dy, float r) {
    switch (shape % 8) {
        case 0: return dx * dx + dy * dy <= r * r;                                       // circle
        case 1: return std::max(std::abs(dx), std::abs(dy)) <= 0.9f * r;                 // square
        case 2: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5f;           // triangle
        case 3: return (std::abs(dx) <= 0.33f * r && std::abs(dy) <= r) ||
                       (std::abs(dy) <= 0.33f * r && std::abs(dx) <= r);                 // cross
        case 4: return std::abs(dx) + std::abs(dy) <= r;                                 // diamond
        case 5: {                                                                        // ring
            const float d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.3f * r * r;
        }
        case 6: return std::abs(dy) <= 0.35f * r && std::abs(dx) <= r;                   // bar
        default: return dx * dx + dy * dy <= 0.25f * r * r;                              // dot
    }
}

Image render_concept(int concept_id, int size, double noise_std, Rng& rng) {
    Image img{3, size, size, std::vector<float>(static_cast<size_t>(3) * size * size)};
    const auto& col = kColors[concept_id];
    const float base = 0.42f;
    const float cx = size / 2.0f + static_cast<float>(rng.uniform(-size / 10.0, size / 10.0));
    const float cy = size / 2.0f + static_cast<float>(rng.uniform(-size / 10.0, size / 10.0));
    const float radius = static_cast<float>(size) * static_cast<float>(rng.uniform(0.28, 0.40));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const bool hit = inside_shape(concept_id, x - cx, y - cy, radius);
            const float rr = hit ? col.r : base;
            const float gg = hit ? col.g : base;
            const float bb = hit ? col.b : base;
            img.at(0, y, x) = std::clamp(rr + static_cast<float>(rng.normal() * noise_std), 0.0f, 1.0f);
            img.at(1, y, x) = std::clamp(gg + static_cast<float>(rng.normal() * noise_std), 0.0f, 1.0f);
            img.at(2, y, x) = std::clamp(bb + static_cast<float>(rng.normal() * noise_std), 0.0f, 1.0f);
        }
    return img;
}

std::string fill_template(int tpl, const WordGroup& color, const WordGroup& shape) {
    switch (tpl % 6) {
        case 0: return std::string("a ") + color.name + " " + shape.name;
        case 1: return std::string("a photo of a ") + color.name + " " + shape.name;
        case 2: return std::string("the ") + color.syn1 + " " + shape.syn1;
        case 3: return std::string("an image of a ") + color.syn2 + " " + shape.syn2;
        case 4: return std::string("there is a ") + color.name + " " + shape.syn1 + " here";
        default: return std::string("a small ") + color.syn1 + " " + shape.name + " on a plain field";
    }
}

void write_sidecars(const GenSpec& spec, const fs::path& dir) {
    // synonym groups, symmetric within each group
    std::ofstream lex(dir / "lexicon.tsv", std::ios::binary);
    auto group = [&lex](const WordGroup& g) {
        lex << g.name << '\t' << g.syn1 << ',' << g.syn2 << '\n';
        lex << g.syn1 << '\t' << g.name << ',' << g.syn2 << '\n';
        lex << g.syn2 << '\t' << g.name << ',' << g.syn1 << '\n';
    };
    for (int c = 0; c < spec.concepts; ++c) {
        group(kColors[c].words);
        group(kShapes[c]);
    }

    // tag map and english word list covering every emitted word
    const std::vector<std::pair<std::string, std::string>> fixed_tags = {
        {"a", "det"},     {"an", "det"},   {"the", "det"},  {"photo", "noun"}, {"image", "noun"},
        {"of", "prep"},   {"on", "prep"},  {"is", "verb"},  {"there", "adv"},  {"here", "adv"},
        {"small", "adj"}, {"plain", "adj"}, {"field", "noun"},
    };
    std::ofstream tags(dir / "tagmap.tsv", std::ios::binary);
    std::ofstream english(dir / "english.txt", std::ios::binary);
    std::unordered_set<std::string> seen;
    auto emit = [&](const std::string& word, const std::string& tag) {
        if (!seen.insert(word).second) return;
        tags << word << '\t' << tag << '\n';
        english << word << '\n';
    };
    for (const auto& [w, t] : fixed_tags) emit(w, t);
    for (int c = 0; c < spec.concepts; ++c) {
        emit(kColors[c].words.name, "adj");
        emit(kColors[c].words.syn1, "adj");
        emit(kColors[c].words.syn2, "adj");
        emit(kShapes[c].name, "noun");
        emit(kShapes[c].syn1, "noun");
        emit(kShapes[c].syn2, "noun");
    }

    std::ofstream labels(dir / "labels.txt", std::ios::binary);
    for (int c = 0; c < spec.concepts; ++c)
        labels << kColors[c].words.name << ' ' << kShapes[c].name << '\n';

    std::ofstream prompts(dir / "prompts.txt", std::ios::binary);
    prompts << "a photo of a {label}\n";
    prompts << "a {label}\n";
    prompts << "the {label}\n";
    prompts << "an image of a {label}\n";
}

}  // namespace

GenSpec GenSpec::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open generator spec " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("generator spec " + path + ": " + e.what());
    }
    GenSpec s;
    s.concepts = j.value("concepts", s.concepts);
    s.paraphrases_per_concept = j.value("paraphrases_per_concept", s.paraphrases_per_concept);
    s.pairs_per_concept = j.value("pairs_per_concept", s.pairs_per_concept);
    s.image_size = j.value("image_size", s.image_size);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.seed = j.value("seed", s.seed);
    s.eval_per_concept = j.value("eval_per_concept", s.eval_per_concept);
    s.validate();
    return s;
}

void GenSpec::validate() const {
    if (concepts < 2 || concepts > kMaxConcepts)
        throw ConfigError("concepts must lie in [2," + std::to_string(kMaxConcepts) + "]");
    if (paraphrases_per_concept < 1 || paraphrases_per_concept > 6)
        throw ConfigError("paraphrases_per_concept must lie in [1,6]");
    if (pairs_per_concept < 1 || image_size < 8 || noise_std < 0 || eval_per_concept < 0)
        throw ConfigError("invalid generator spec");
}

void synth_generate(const GenSpec& spec, const std::string& out_dir) {
    spec.validate();
    const fs::path dir(out_dir);
    fs::create_directories(dir / "images");

    auto make_records = [&](int per_concept, const char* prefix, uint64_t salt) {
        Manifest m;
        for (int c = 0; c < spec.concepts; ++c) {
            for (int i = 0; i < per_concept; ++i) {
                Rng rng = derive_rng(spec.seed, salt, static_cast<uint64_t>(c), static_cast<uint64_t>(i));
                ManifestRecord r;
                const Image img = render_concept(c, spec.image_size, spec.noise_std, rng);
                char name[64];
                std::snprintf(name, sizeof(name), "images/%s_%02d_%05d.ppm", prefix, c, i);
                r.image_path = name;
                save_ppm(img, (dir / name).string());
                const int tpl = static_cast<int>(rng.below(spec.paraphrases_per_concept));
                r.caption = fill_template(tpl, kColors[c].words, kShapes[c]);
                r.label = c;
                m.records.push_back(std::move(r));
            }
        }
        return m;
    };

    // interleave concepts so truncated prefixes stay balanced
    Manifest train = make_records(spec.pairs_per_concept, "train", 0x7261);
    {
        std::vector<ManifestRecord> inter;
        inter.reserve(train.records.size());
        for (int i = 0; i < spec.pairs_per_concept; ++i)
            for (int c = 0; c < spec.concepts; ++c)
                inter.push_back(std::move(train.records[static_cast<size_t>(c) * spec.pairs_per_concept + i]));
        train.records = std::move(inter);
    }
    save_manifest(train, (dir / "manifest.jsonl").string());

    Manifest eval = make_records(spec.eval_per_concept, "eval", 0xe4a1);
    save_manifest(eval, (dir / "eval.jsonl").string());

    write_sidecars(spec, dir);
}

// ---------------------------------------------------------------------------
// Dataset assembly

Dataset load_dataset(const std::string& data_dir, const std::string& manifest_name, int image_size,
                     int vocab_min_count, const Vocab* fixed_vocab) {
    const fs::path dir(data_dir);
    Dataset ds;
    ds.manifest = load_manifest((dir / manifest_name).string());

    // caption filters, when the sidecar files are present
    if (fs::exists(dir / "english.txt") && fs::exists(dir / "tagmap.tsv")) {
        const auto english = load_word_set((dir / "english.txt").string());
        const auto tags = load_tag_map((dir / "tagmap.tsv").string());
        std::vector<ManifestRecord> kept;
        for (auto& r : ds.manifest.records)
            if (filter_caption(r.caption, english, tags).keep) kept.push_back(std::move(r));
        ds.manifest.records = std::move(kept);
    }
    if (ds.manifest.records.empty()) throw DataError("no records survive filtering in " + data_dir);

    ds.images.reserve(ds.manifest.records.size());
    for (const auto& r : ds.manifest.records) {
        if (!r.image_path.empty()) {
            Image img = load_ppm((dir / r.image_path).string());
            if (img.height != image_size || img.width != image_size)
                throw ShapeError("image " + r.image_path + " is " + std::to_string(img.width) + "x" +
                                 std::to_string(img.height) + ", expected " + std::to_string(image_size));
            ds.images.push_back(std::move(img));
        } else {
            if (r.pixels.size() != static_cast<size_t>(3) * image_size * image_size)
                throw ShapeError("inline pixels have length " + std::to_string(r.pixels.size()) + ", expected " +
                                 std::to_string(3 * image_size * image_size));
            ds.images.push_back(Image{3, image_size, image_size, r.pixels});
        }
    }

    if (fixed_vocab) {
        ds.vocab = *fixed_vocab;
    } else {
        std::vector<std::string> captions;
        captions.reserve(ds.manifest.records.size());
        for (const auto& r : ds.manifest.records) captions.push_back(r.caption);
        ds.vocab = Vocab::build(captions, vocab_min_count);
    }

    ds.tokens.reserve(ds.manifest.records.size());
    for (const auto& r : ds.manifest.records) ds.tokens.push_back(content_ids(r.caption, ds.vocab));

    if (fs::exists(dir / "lexicon.tsv")) ds.lexicon = load_lexicon((dir / "lexicon.tsv").string(), ds.vocab);
    if (fs::exists(dir / "labels.txt")) ds.label_names = load_lines((dir / "labels.txt").string());
    if (fs::exists(dir / "prompts.txt")) ds.prompts = load_lines((dir / "prompts.txt").string());
    return ds;
}

}  // namespace miniclip
