#pragma once

// Corpus handling: whitespace tokenizer over a corpus-built vocabulary,
// keyword frequency statistics with stoplist filtering, keyword masking, and
// a synthetic caption/feature generator with controlled weakly correlated
// pairs. Corpora live on disk as line-delimited JSON plus one EBKF1 feature
// file per sample.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iterator>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ebaker/io.hpp"
#include "ebaker/tensor.hpp"

namespace ebaker::corpus {

using json = nlohmann::json;

// Lowercase, strip punctuation, split on whitespace.
inline std::vector<std::string> normalize_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

struct Vocabulary {
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr std::size_t kSos = 2;
    static constexpr std::size_t kEos = 3;
    static constexpr std::size_t kMask = 4;
    static constexpr std::size_t kNumSpecials = 5;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, std::size_t> token_to_id;

    std::size_t size() const { return id_to_token.size(); }

    std::size_t lookup(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token(std::size_t id) const { return id_to_token.at(id); }

    // Specials first, then corpus tokens ordered by frequency (descending)
    // with lexicographic tie-break for determinism.
    static Vocabulary build(const std::vector<std::string>& texts) {
        std::unordered_map<std::string, std::size_t> freq;
        for (const auto& t : texts)
            for (auto& tok : normalize_text(t)) ++freq[tok];
        std::vector<std::pair<std::string, std::size_t>> order(freq.begin(), freq.end());
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        v.id_to_token = {"[PAD]", "[UNK]", "[SOS]", "[EOS]", "[MASK]"};
        for (auto& [tok, _] : order) v.id_to_token.push_back(tok);
        for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
            v.token_to_id[v.id_to_token[i]] = i;
        return v;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write vocabulary: " + path.string());
        for (const auto& t : id_to_token) os << t << "\n";
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot read vocabulary: " + path.string());
        Vocabulary v;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) v.id_to_token.push_back(line);
        if (v.id_to_token.size() < kNumSpecials)
            throw std::runtime_error("vocabulary too small: " + path.string());
        for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
            v.token_to_id[v.id_to_token[i]] = i;
        return v;
    }
};

struct TokenizeOptions {
    std::size_t max_len = 32;    // includes [SOS]/[EOS]
    bool pad_to_max = false;
};

// [SOS] + ids + [EOS], unknowns mapped to [UNK]. A caption longer than
// max_len is truncated so [EOS] lands on the final slot.
inline std::vector<std::size_t> tokenize(const std::string& text, const Vocabulary& vocab,
                                         const TokenizeOptions& opts = {}) {
    if (opts.max_len < 3) throw std::invalid_argument("tokenize: max_len must be >= 3");
    auto words = normalize_text(text);
    if (words.empty())
        throw std::invalid_argument("tokenize: text empty after normalization");
    std::vector<std::size_t> ids;
    ids.reserve(std::min(words.size() + 2, opts.max_len));
    ids.push_back(Vocabulary::kSos);
    for (const auto& w : words) {
        if (ids.size() == opts.max_len - 1) break;
        ids.push_back(vocab.lookup(w));
    }
    ids.push_back(Vocabulary::kEos);
    if (opts.pad_to_max) ids.resize(opts.max_len, Vocabulary::kPad);
    return ids;
}

inline const std::set<std::string>& default_stoplist() {
    static const std::set<std::string> words = {
        "a",    "an",   "the",  "of",   "in",   "on",    "at",   "to",
        "with", "and",  "or",   "for",  "from", "by",    "near", "is",
        "are",  "was",  "were", "this", "that", "these", "those", "it",
        "its",  "as",   "be",   "has",  "have", "some"};
    return words;
}

inline std::set<std::string> load_stoplist(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read stoplist: " + path.string());
    std::set<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
        auto toks = normalize_text(line);
        for (auto& t : toks) words.insert(t);
    }
    return words;
}

struct KeywordList {
    std::vector<std::string> keywords;        // merged, first-seen order
    std::vector<std::size_t> source_counts;   // keywords contributed per corpus
    std::vector<std::string> provenance;      // one line per corpus
    std::unordered_set<std::string> index;

    bool contains(const std::string& w) const { return index.count(w) > 0; }
    std::size_t size() const { return keywords.size(); }
};

// Per corpus: frequency table over normalized tokens minus the stoplist,
// top-k by count with lexicographic tie-break; lists are merged across
// corpora in first-seen order with duplicates removed.
inline KeywordList compute_keywords(const std::vector<std::vector<std::string>>& corpora,
                                    std::size_t k, const std::set<std::string>& stoplist) {
    if (k < 1) throw std::invalid_argument("compute_keywords: k must be >= 1");
    if (corpora.empty()) throw std::invalid_argument("compute_keywords: no corpora");
    KeywordList list;
    for (std::size_t ci = 0; ci < corpora.size(); ++ci) {
        const auto& captions = corpora[ci];
        std::unordered_map<std::string, std::size_t> freq;
        for (const auto& c : captions)
            for (auto& tok : normalize_text(c))
                if (!stoplist.count(tok)) ++freq[tok];
        if (captions.empty() || freq.empty())
            throw std::invalid_argument("compute_keywords: corpus " + std::to_string(ci) +
                                        " is empty");
        std::vector<std::pair<std::string, std::size_t>> order(freq.begin(), freq.end());
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        std::size_t take = std::min(k, order.size());
        std::size_t contributed = 0;
        for (std::size_t i = 0; i < take; ++i) {
            if (list.index.insert(order[i].first).second) {
                list.keywords.push_back(order[i].first);
                ++contributed;
            }
        }
        list.source_counts.push_back(contributed);
        list.provenance.push_back("corpus " + std::to_string(ci) + ": top-" +
                                  std::to_string(take) + " of " +
                                  std::to_string(order.size()) + " tokens, " +
                                  std::to_string(contributed) + " new after merge");
    }
    return list;
}

inline void save_keywords(const std::filesystem::path& path, const KeywordList& list) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write keywords: " + path.string());
    for (const auto& p : list.provenance) os << "# " << p << "\n";
    for (const auto& w : list.keywords) os << w << "\n";
}

inline KeywordList load_keywords(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read keywords: " + path.string());
    KeywordList list;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            list.provenance.push_back(line.substr(line.find_first_not_of("# ")));
            continue;
        }
        if (list.index.insert(line).second) list.keywords.push_back(line);
    }
    list.source_counts.push_back(list.keywords.size());
    return list;
}

struct MaskedSequence {
    std::vector<std::size_t> tokens;            // keyword slots replaced by [MASK]
    std::vector<std::size_t> masked_positions;  // strictly increasing
    std::vector<std::size_t> masked_targets;    // original ids at those slots
};

// Every token whose surface form is a keyword becomes [MASK]; specials are
// never masked. Zero masked slots is legal.
inline MaskedSequence mask_keywords(const std::vector<std::size_t>& tokens,
                                    const KeywordList& keywords, const Vocabulary& vocab) {
    MaskedSequence out;
    out.tokens = tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        std::size_t id = tokens[i];
        if (id < Vocabulary::kNumSpecials) continue;
        if (!keywords.contains(vocab.token(id))) continue;
        out.masked_positions.push_back(i);
        out.masked_targets.push_back(id);
        out.tokens[i] = Vocabulary::kMask;
    }
    return out;
}

inline std::vector<std::size_t> unmask(const MaskedSequence& seq) {
    auto tokens = seq.tokens;
    for (std::size_t i = 0; i < seq.masked_positions.size(); ++i)
        tokens[seq.masked_positions[i]] = seq.masked_targets[i];
    return tokens;
}

// ---------------------------------------------------------------------------

struct CaptionedSample {
    std::string sample_id;
    Tensor features;             // [N x d] local patch features
    std::string features_path;   // relative path when persisted
    std::vector<std::string> captions;
    std::string class_label;     // optional; synthetic only
    std::string caption_class;   // diagnostic: class the caption describes
};

struct Corpus {
    std::vector<CaptionedSample> samples;
    std::size_t size() const { return samples.size(); }
    std::vector<std::string> all_captions() const {
        std::vector<std::string> out;
        for (const auto& s : samples)
            for (const auto& c : s.captions) out.push_back(c);
        return out;
    }
};

struct SynthConfig {
    std::size_t classes = 8;
    std::size_t train_per_class = 64;
    std::size_t test_per_class = 16;
    std::size_t patches = 16;       // local vectors per sample
    std::size_t feature_dim = 8;
    double corruption = 0.0;        // probability a train caption is swapped
    double patch_noise = 0.5;
    double class_scale = 2.0;
    double attr_scale = 0.8;
    std::size_t attrs_per_sample = 2;
    std::uint64_t seed = 1;
    std::vector<std::string> class_names;   // defaults generated when empty
    std::vector<std::string> attributes;
    std::vector<std::string> fillers;
    // Placeholders: {class} {attr0} {attr1} ... {fill}
    std::string caption_template = "a {attr0} and {attr1} {class} in the {fill}";
};

struct SynthCorpus {
    Corpus train;
    Corpus test;
    std::vector<std::size_t> corrupted;  // indices into train.samples
    SynthConfig config;
};

inline SynthConfig synth_config_from_json(const json& j) {
    SynthConfig c;
    c.classes = j.value("classes", c.classes);
    c.train_per_class = j.value("train_per_class", c.train_per_class);
    c.test_per_class = j.value("test_per_class", c.test_per_class);
    c.patches = j.value("patches", c.patches);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.corruption = j.value("corruption", c.corruption);
    c.patch_noise = j.value("patch_noise", c.patch_noise);
    c.class_scale = j.value("class_scale", c.class_scale);
    c.attr_scale = j.value("attr_scale", c.attr_scale);
    c.attrs_per_sample = j.value("attrs_per_sample", c.attrs_per_sample);
    c.seed = j.value("seed", c.seed);
    if (j.contains("class_names"))
        c.class_names = j["class_names"].get<std::vector<std::string>>();
    if (j.contains("attributes"))
        c.attributes = j["attributes"].get<std::vector<std::string>>();
    if (j.contains("fillers")) c.fillers = j["fillers"].get<std::vector<std::string>>();
    c.caption_template = j.value("caption_template", c.caption_template);
    return c;
}

namespace detail {

inline std::string render_caption(const std::string& tmpl, const std::string& cls,
                                  const std::vector<std::string>& attrs,
                                  const std::string& fill) {
    std::string out = tmpl;
    auto replace_all = [&out](const std::string& key, const std::string& value) {
        std::size_t pos;
        while ((pos = out.find(key)) != std::string::npos)
            out.replace(pos, key.size(), value);
    };
    replace_all("{class}", cls);
    for (std::size_t i = 0; i < attrs.size(); ++i)
        replace_all("{attr" + std::to_string(i) + "}", attrs[i]);
    replace_all("{fill}", fill);
    return out;
}

inline std::vector<std::string> default_class_names(std::size_t n) {
    static const std::vector<std::string> base = {"airport", "forest",  "harbor", "river",
                                                  "meadow",  "stadium", "desert", "viaduct",
                                                  "island",  "bridge",  "farm",   "plaza"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(i < base.size() ? base[i] : "class" + std::to_string(i));
    return out;
}

}  // namespace detail

// Each sample draws its class prototype plus per-sample attribute offsets and
// Gaussian patch noise; its caption names the class and attributes. With
// probability `corruption` a train caption is replaced by one describing a
// different class, forming a weakly correlated pair; the list of such pairs
// is recorded for diagnostics only.
inline SynthCorpus generate_synthetic(const SynthConfig& cfg_in) {
    SynthConfig cfg = cfg_in;
    if (cfg.classes < 2) throw std::invalid_argument("generate_synthetic: classes must be >= 2");
    if (cfg.corruption < 0.0 || cfg.corruption >= 1.0)
        throw std::invalid_argument("generate_synthetic: corruption must be in [0,1)");
    if (cfg.class_names.empty()) cfg.class_names = detail::default_class_names(cfg.classes);
    if (cfg.class_names.size() != cfg.classes)
        throw std::invalid_argument("generate_synthetic: class_names size mismatch");
    if (cfg.attributes.empty())
        cfg.attributes = {"small", "large", "dense", "sparse", "bright", "dark"};
    if (cfg.fillers.empty()) cfg.fillers = {"north", "south", "east", "west"};
    if (cfg.attrs_per_sample > cfg.attributes.size())
        throw std::invalid_argument("generate_synthetic: attrs_per_sample too large");

    Rng proto_rng = make_stream(cfg.seed, 0);
    const std::size_t d = cfg.feature_dim;
    std::vector<std::vector<double>> prototypes(cfg.classes, std::vector<double>(d));
    for (auto& p : prototypes)
        for (auto& v : p) v = proto_rng.normal(0.0, cfg.class_scale);
    std::vector<std::vector<double>> attr_dirs(cfg.attributes.size(), std::vector<double>(d));
    for (auto& a : attr_dirs) {
        double norm = 0.0;
        for (auto& v : a) {
            v = proto_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : a) v = v / norm * cfg.attr_scale;
    }

    auto draw_attrs = [&](Rng& rng) {
        std::vector<std::size_t> picks;
        while (picks.size() < cfg.attrs_per_sample) {
            std::size_t a = rng.integer(cfg.attributes.size());
            if (std::find(picks.begin(), picks.end(), a) == picks.end()) picks.push_back(a);
        }
        std::sort(picks.begin(), picks.end());
        return picks;
    };

    auto make_sample = [&](Rng& rng, std::size_t cls, const std::string& id) {
        CaptionedSample s;
        s.sample_id = id;
        s.class_label = cfg.class_names[cls];
        auto attrs = draw_attrs(rng);
        std::vector<double> latent = prototypes[cls];
        for (std::size_t a : attrs)
            for (std::size_t j = 0; j < d; ++j) latent[j] += attr_dirs[a][j];
        std::vector<double> feats(cfg.patches * d);
        for (std::size_t p = 0; p < cfg.patches; ++p)
            for (std::size_t j = 0; j < d; ++j)
                feats[p * d + j] = latent[j] + rng.normal(0.0, cfg.patch_noise);
        s.features = Tensor::from_data({cfg.patches, d}, std::move(feats));
        std::vector<std::string> attr_words;
        for (std::size_t a : attrs) attr_words.push_back(cfg.attributes[a]);
        std::string fill = cfg.fillers[rng.integer(cfg.fillers.size())];
        s.captions = {detail::render_caption(cfg.caption_template, cfg.class_names[cls],
                                             attr_words, fill)};
        s.caption_class = cfg.class_names[cls];
        return s;
    };

    SynthCorpus out;
    out.config = cfg;

    Rng train_rng = make_stream(cfg.seed, 1);
    char buf[32];
    for (std::size_t c = 0; c < cfg.classes; ++c)
        for (std::size_t i = 0; i < cfg.train_per_class; ++i) {
            std::size_t idx = out.train.samples.size();
            std::snprintf(buf, sizeof buf, "train_%04zu", idx);
            out.train.samples.push_back(make_sample(train_rng, c, buf));
        }

    // corruption pass: replace the caption with one describing another class
    Rng corrupt_rng = make_stream(cfg.seed, 2);
    for (std::size_t i = 0; i < out.train.samples.size(); ++i) {
        if (corrupt_rng.uniform() >= cfg.corruption) continue;
        auto& s = out.train.samples[i];
        std::size_t own = std::distance(
            cfg.class_names.begin(),
            std::find(cfg.class_names.begin(), cfg.class_names.end(), s.class_label));
        std::size_t other = corrupt_rng.integer(cfg.classes - 1);
        if (other >= own) ++other;
        auto attrs = draw_attrs(corrupt_rng);
        std::vector<std::string> attr_words;
        for (std::size_t a : attrs) attr_words.push_back(cfg.attributes[a]);
        std::string fill = cfg.fillers[corrupt_rng.integer(cfg.fillers.size())];
        s.captions = {detail::render_caption(cfg.caption_template, cfg.class_names[other],
                                             attr_words, fill)};
        s.caption_class = cfg.class_names[other];
        out.corrupted.push_back(i);
    }

    Rng test_rng = make_stream(cfg.seed, 3);
    for (std::size_t c = 0; c < cfg.classes; ++c)
        for (std::size_t i = 0; i < cfg.test_per_class; ++i) {
            std::size_t idx = out.test.samples.size();
            std::snprintf(buf, sizeof buf, "test_%04zu", idx);
            out.test.samples.push_back(make_sample(test_rng, c, buf));
        }

    return out;
}

// --- disk layout -------------------------------------------------------------
// <dir>/train.jsonl, <dir>/test.jsonl, <dir>/features/<sample_id>.ebkf,
// <dir>/manifest.json

inline void write_split(const std::filesystem::path& dir, const std::string& split,
                        const Corpus& corpus) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    std::ofstream os(dir / (split + ".jsonl"), std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write corpus split " + split);
    for (const auto& s : corpus.samples) {
        std::string rel = "features/" + s.sample_id + ".ebkf";
        io::save_features(dir / rel, s.features);
        json rec;
        rec["sample_id"] = s.sample_id;
        rec["captions"] = s.captions;
        if (!s.class_label.empty()) rec["class"] = s.class_label;
        rec["features"] = rel;
        os << rec.dump() << "\n";
    }
}

inline Corpus read_split(const std::filesystem::path& dir, const std::string& split) {
    std::ifstream is(dir / (split + ".jsonl"));
    if (!is)
        throw std::runtime_error("cannot read corpus split: " +
                                 (dir / (split + ".jsonl")).string());
    Corpus corpus;
    std::string line;
    std::unordered_set<std::string> seen;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        CaptionedSample s;
        s.sample_id = rec.at("sample_id").get<std::string>();
        if (!seen.insert(s.sample_id).second)
            throw std::runtime_error("duplicate sample_id: " + s.sample_id);
        s.captions = rec.at("captions").get<std::vector<std::string>>();
        if (s.captions.empty() ||
            std::any_of(s.captions.begin(), s.captions.end(),
                        [](const std::string& c) { return c.empty(); }))
            throw std::runtime_error("sample " + s.sample_id + " has an empty caption");
        if (rec.contains("class")) s.class_label = rec["class"].get<std::string>();
        s.features_path = rec.at("features").get<std::string>();
        s.features = io::read_features(dir / s.features_path);
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

inline void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpus& sc) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_split(dir, "train", sc.train);
    write_split(dir, "test", sc.test);
    json manifest;
    manifest["schema_version"] = 1;
    manifest["seed"] = sc.config.seed;
    manifest["classes"] = sc.config.class_names;
    manifest["corruption"] = sc.config.corruption;
    manifest["train_size"] = sc.train.size();
    manifest["test_size"] = sc.test.size();
    manifest["corrupted_count"] = sc.corrupted.size();
    json corrupted = json::array();
    for (std::size_t i : sc.corrupted) {
        const auto& s = sc.train.samples[i];
        corrupted.push_back({{"index", i},
                             {"sample_id", s.sample_id},
                             {"image_class", s.class_label},
                             {"caption_class", s.caption_class}});
    }
    manifest["corrupted"] = corrupted;
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest");
    os << manifest.dump(2) << "\n";
}

}  // namespace ebaker::corpus
