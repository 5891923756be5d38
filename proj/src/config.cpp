#include "selftrans/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "selftrans/errors.hpp"
#include "selftrans/hash.hpp"

namespace st {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class TomlParser {
public:
    explicit TomlParser(const std::string& text) : s_(text) {}

    json parse_document() {
        json root = json::object();
        json* table = &root;
        std::set<std::string> defined_tables;
        for (;;) {
            skip_blank_lines();
            if (eof()) break;
            if (peek() == '[') {
                ++pos_;
                if (peek() == '[') fail("arrays of tables are not supported");
                skip_ws();
                const auto path = parse_key();
                skip_ws();
                expect(']');
                end_of_line();
                std::string joined;
                for (const auto& k : path) joined += (joined.empty() ? "" : ".") + k;
                if (!defined_tables.insert(joined).second) fail("table [" + joined + "] defined twice");
                table = &root;
                for (const auto& k : path) {
                    json& next = (*table)[k];
                    if (next.is_null()) next = json::object();
                    if (!next.is_object()) fail("'" + joined + "' is already a value, not a table");
                    table = &next;
                }
                continue;
            }
            const auto path = parse_key();
            skip_ws();
            expect('=');
            skip_ws();
            json value = parse_value();
            end_of_line();
            json* target = table;
            for (std::size_t i = 0; i + 1 < path.size(); ++i) {
                json& next = (*target)[path[i]];
                if (next.is_null()) next = json::object();
                if (!next.is_object()) fail("'" + path[i] + "' is already a value, not a table");
                target = &next;
            }
            if (target->contains(path.back())) fail("key '" + path.back() + "' defined twice");
            (*target)[path.back()] = std::move(value);
        }
        return root;
    }

    json parse_single_value() {
        skip_ws();
        json v = parse_value();
        skip_ws();
        if (!eof()) fail("trailing characters after value");
        return v;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        int line = 1;
        for (std::size_t i = 0; i < pos_ && i < s_.size(); ++i) line += s_[i] == '\n';
        throw ConfigError("config line " + std::to_string(line) + ": " + what);
    }

    bool eof() const { return pos_ >= s_.size(); }
    char peek() const { return eof() ? '\0' : s_[pos_]; }
    void expect(char c) {
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }
    void skip_ws() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
    }
    void skip_comment() {
        if (peek() == '#')
            while (!eof() && peek() != '\n') ++pos_;
    }
    void skip_blank_lines() {
        for (;;) {
            skip_ws();
            skip_comment();
            if (peek() == '\r' || peek() == '\n') {
                ++pos_;
                continue;
            }
            return;
        }
    }
    void end_of_line() {
        skip_ws();
        skip_comment();
        if (peek() == '\r') ++pos_;
        if (!eof() && peek() != '\n') fail("expected end of line");
        if (!eof()) ++pos_;
    }

    std::vector<std::string> parse_key() {
        std::vector<std::string> parts;
        for (;;) {
            skip_ws();
            if (peek() == '"') {
                parts.push_back(parse_basic_string());
            } else {
                const std::size_t start = pos_;
                while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-'))
                    ++pos_;
                if (start == pos_) fail("expected a key");
                parts.push_back(s_.substr(start, pos_ - start));
            }
            skip_ws();
            if (peek() != '.') return parts;
            ++pos_;
        }
    }

    std::string parse_basic_string() {
        expect('"');
        if (s_.compare(pos_, 2, "\"\"") == 0) fail("multi-line strings are not supported");
        std::string out;
        for (;;) {
            if (eof() || peek() == '\n') fail("unterminated string");
            const char c = s_[pos_++];
            if (c == '"') return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (eof()) fail("unterminated escape");
            switch (s_[pos_++]) {
            case '"': out += '"'; break;
            case '\\': out += '\\'; break;
            case 'n': out += '\n'; break;
            case 't': out += '\t'; break;
            case 'r': out += '\r'; break;
            default: fail("unsupported escape sequence");
            }
        }
    }

    std::string parse_literal_string() {
        expect('\'');
        const std::size_t start = pos_;
        while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
        if (peek() != '\'') fail("unterminated string");
        return s_.substr(start, pos_++ - start);
    }

    json parse_value() {
        const char c = peek();
        if (c == '"') return parse_basic_string();
        if (c == '\'') return parse_literal_string();
        if (c == '[') return parse_array();
        if (c == '{') fail("inline tables are not supported");
        const std::size_t start = pos_;
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || std::string("_+-.").find(peek()) != std::string::npos))
            ++pos_;
        std::string tok = s_.substr(start, pos_ - start);
        if (tok.empty()) fail("expected a value");
        if (tok == "true") return true;
        if (tok == "false") return false;
        std::string digits;
        for (char ch : tok)
            if (ch != '_') digits += ch;
        const std::string unsigned_part = (digits[0] == '+' || digits[0] == '-') ? digits.substr(1) : digits;
        if (unsigned_part == "inf" || unsigned_part == "nan") {
            const double v = unsigned_part == "inf" ? INFINITY : NAN;
            return digits[0] == '-' ? -v : v;
        }
        const bool is_float = digits.find_first_of(".eE") != std::string::npos;
        for (char ch : unsigned_part)
            if (!std::isdigit(static_cast<unsigned char>(ch)) && std::string(".eE+-").find(ch) == std::string::npos)
                fail("invalid value '" + tok + "'");
        if (unsigned_part.empty() || !std::isdigit(static_cast<unsigned char>(unsigned_part[0])))
            fail("invalid value '" + tok + "'");
        std::size_t used = 0;
        try {
            if (is_float) {
                const double v = std::stod(digits, &used);
                if (used == digits.size()) return v;
            } else {
                const long long v = std::stoll(digits, &used, 10);
                if (used == digits.size()) return static_cast<int64_t>(v);
            }
        } catch (const std::exception&) {
        }
        fail("invalid number '" + tok + "'");
    }

    json parse_array() {
        expect('[');
        json arr = json::array();
        for (;;) {
            skip_blank_lines();
            if (peek() == ']') {
                ++pos_;
                return arr;
            }
            arr.push_back(parse_value());
            skip_blank_lines();
            if (peek() == ',') {
                ++pos_;
                continue;
            }
            skip_blank_lines();
            expect(']');
            return arr;
        }
    }

    const std::string& s_;
    std::size_t pos_ = 0;
};

// ---- schema ---------------------------------------------------------------

enum class Kind { Int, UInt, Float, Bool, String, OptInt };

struct Field {
    std::string key;
    Kind kind;
    std::function<void(RunConfig&, const json&)> set;
    std::function<std::optional<json>(const RunConfig&)> get;
};

const char* type_name(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "float";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "table";
    return "null";
}

[[noreturn]] void type_error(const std::string& key, const char* want, const json& v) {
    throw ConfigError(key + ": expected " + want + ", got " + type_name(v));
}

int64_t as_int(const std::string& key, const json& v) {
    if (!v.is_number_integer()) type_error(key, "an integer", v);
    return v.get<int64_t>();
}

template <typename Ref>
Field int_field(std::string key, Ref ref) {
    return {key, Kind::Int,
            [key, ref](RunConfig& c, const json& v) {
                const int64_t x = as_int(key, v);
                using T = std::remove_reference_t<decltype(ref(c))>;
                if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max())
                    throw ConfigError(key + ": value out of range");
                ref(c) = static_cast<T>(x);
            },
            [ref](const RunConfig& c) -> std::optional<json> { return json(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Field uint_field(std::string key, Ref ref) {
    return {key, Kind::UInt,
            [key, ref](RunConfig& c, const json& v) {
                if (!v.is_number_integer()) type_error(key, "an integer", v);
                if (v.is_number_unsigned()) {
                    ref(c) = v.get<uint64_t>();
                    return;
                }
                const int64_t x = v.get<int64_t>();
                if (x < 0) throw ConfigError(key + ": must be >= 0");
                ref(c) = static_cast<uint64_t>(x);
            },
            [ref](const RunConfig& c) -> std::optional<json> { return json(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Field float_field(std::string key, Ref ref) {
    return {key, Kind::Float,
            [key, ref](RunConfig& c, const json& v) {
                if (!v.is_number()) type_error(key, "a number", v);
                ref(c) = v.get<double>();
            },
            [ref](const RunConfig& c) -> std::optional<json> { return json(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Field bool_field(std::string key, Ref ref) {
    return {key, Kind::Bool,
            [key, ref](RunConfig& c, const json& v) {
                if (!v.is_boolean()) type_error(key, "a boolean", v);
                ref(c) = v.get<bool>();
            },
            [ref](const RunConfig& c) -> std::optional<json> { return json(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Field string_field(std::string key, Ref ref) {
    return {key, Kind::String,
            [key, ref](RunConfig& c, const json& v) {
                if (!v.is_string()) type_error(key, "a string", v);
                ref(c) = v.get<std::string>();
            },
            [ref](const RunConfig& c) -> std::optional<json> { return json(ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Field opt_int_field(std::string key, Ref ref) {
    return {key, Kind::OptInt, [key, ref](RunConfig& c, const json& v) { ref(c) = as_int(key, v); },
            [ref](const RunConfig& c) -> std::optional<json> {
                const auto& o = ref(const_cast<RunConfig&>(c));
                return o ? std::optional<json>(json(*o)) : std::nullopt;
            }};
}

#define REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        string_field("output_dir", REF(output_dir)),
        uint_field("seed", REF(seed)),
        bool_field("deterministic", REF(deterministic)),

        string_field("dataset.kind", REF(dataset.kind)),
        string_field("dataset.path", REF(dataset.path)),
        int_field("dataset.image_size", REF(dataset.image_size)),
        int_field("dataset.num_classes", REF(dataset.num_classes)),
        int_field("dataset.samples_per_class", REF(dataset.samples_per_class)),
        uint_field("dataset.seed", REF(dataset.seed)),

        int_field("codec.downsample_factor", REF(codec.downsample_factor)),
        int_field("codec.latent_channels", REF(codec.latent_channels)),
        float_field("codec.kl_weight", REF(codec.kl_weight)),
        int_field("codec.base_channels", REF(codec.base_channels)),
        int_field("codec.steps", REF(codec.steps)),
        int_field("codec.batch_size", REF(codec.batch_size)),
        float_field("codec.lr", REF(codec.lr)),
        string_field("codec.checkpoint", REF(codec.checkpoint)),

        int_field("model.depth", REF(model.depth)),
        int_field("model.hidden_dim", REF(model.hidden_dim)),
        int_field("model.heads", REF(model.heads)),
        int_field("model.patch_size", REF(model.patch_size)),
        int_field("model.mlp_ratio", REF(model.mlp_ratio)),
        int_field("model.freq_dim", REF(model.freq_dim)),
        float_field("model.cond_dropout_prob", REF(model.cond_dropout_prob)),

        float_field("guidance.omega", REF(guidance.omega)),
        float_field("guidance.lambda_guide", REF(guidance.lambda_guide)),
        float_field("guidance.lambda_align", REF(guidance.lambda_align)),
        int_field("guidance.guided_layer", REF(guidance.guided_layer)),
        int_field("guidance.guiding_layer", REF(guidance.guiding_layer)),
        opt_int_field("guidance.stop_step", REF(guidance.stop_step)),
        float_field("guidance.stop_epochs", REF(guidance.stop_epochs)),
        opt_int_field("guidance.teacher_steps", REF(guidance.teacher_steps)),
        float_field("guidance.teacher_epochs", REF(guidance.teacher_epochs)),
        int_field("guidance.head_hidden", REF(guidance.head_hidden)),
        string_field("guidance.guide_checkpoint", REF(guidance.guide_checkpoint)),

        float_field("optimizer.lr", REF(optimizer.lr)),
        float_field("optimizer.beta1", REF(optimizer.beta1)),
        float_field("optimizer.beta2", REF(optimizer.beta2)),
        float_field("optimizer.eps", REF(optimizer.eps)),
        float_field("optimizer.weight_decay", REF(optimizer.weight_decay)),

        opt_int_field("train.total_steps", REF(train.total_steps)),
        float_field("train.total_epochs", REF(train.total_epochs)),
        int_field("train.batch_size", REF(train.batch_size)),
        float_field("train.ema_decay", REF(train.ema_decay)),
        int_field("train.checkpoint_every", REF(train.checkpoint_every)),
        int_field("train.log_every", REF(train.log_every)),

        int_field("sample.num_steps", REF(sample.num_steps)),
        float_field("sample.cfg_scale", REF(sample.cfg_scale)),
        int_field("sample.batch_size", REF(sample.batch_size)),

        int_field("eval.num_samples", REF(eval.num_samples)),
        float_field("eval.feature_t", REF(eval.feature_t)),
        int_field("eval.silhouette_batch", REF(eval.silhouette_batch)),
        string_field("eval.embedder", REF(eval.embedder)),
        int_field("eval.embedder_steps", REF(eval.embedder_steps)),
        int_field("eval.embedder_batch_size", REF(eval.embedder_batch_size)),
        float_field("eval.embedder_lr", REF(eval.embedder_lr)),
        int_field("eval.embedder_feature_dim", REF(eval.embedder_feature_dim)),
    };
    return fields;
}

#undef REF

const Field* find_field(const std::string& key) {
    for (const auto& f : schema())
        if (f.key == key) return &f;
    return nullptr;
}

void bind_tree(RunConfig& cfg, const json& node, const std::string& prefix) {
    for (const auto& [k, v] : node.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        const Field* f = find_field(key);
        if (f) {
            f->set(cfg, v);
            continue;
        }
        if (v.is_object()) {
            const std::string section = key + ".";
            bool known_section = false;
            for (const auto& field : schema()) known_section |= field.key.rfind(section, 0) == 0;
            if (known_section) {
                bind_tree(cfg, v, key);
                continue;
            }
        }
        throw ConfigError(key + ": unknown key");
    }
}

std::string format_float(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    std::string s = buf;
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

std::string format_value(const json& v) {
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_float()) return format_float(v.get<double>());
    if (v.is_number()) return v.dump();
    return v.dump();  // JSON string escaping is valid TOML basic-string escaping for our keys
}

void require(bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw ConfigError(key + ": " + why);
}

}  // namespace

json parse_toml(const std::string& text) { return TomlParser(text).parse_document(); }

json parse_toml_value_lenient(const std::string& text) {
    try {
        return TomlParser(text).parse_single_value();
    } catch (const ConfigError&) {
        return text;
    }
}

void RunConfig::validate() const {
    require(!output_dir.empty(), "output_dir", "must not be empty");

    require(dataset.kind == "shapes" || dataset.kind == "folder", "dataset.kind", "must be \"shapes\" or \"folder\"");
    require(dataset.kind != "folder" || !dataset.path.empty(), "dataset.path", "required for folder datasets");
    require(dataset.num_classes >= 2, "dataset.num_classes", "must be >= 2");
    if (dataset.kind == "shapes") dataset.shapes_spec().validate();
    require(dataset.image_size >= 1, "dataset.image_size", "must be positive");

    codec_config().validate();
    require(codec.steps >= 1, "codec.steps", "must be >= 1");
    require(codec.batch_size >= 1, "codec.batch_size", "must be >= 1");
    require(codec.lr > 0.0 && std::isfinite(codec.lr), "codec.lr", "must be finite and > 0");

    model_config().validate();

    require(std::isfinite(guidance.omega), "guidance.omega", "must be finite");
    require(guidance.lambda_guide >= 0.0 && std::isfinite(guidance.lambda_guide), "guidance.lambda_guide",
            "must be finite and >= 0");
    require(guidance.lambda_align >= 0.0 && std::isfinite(guidance.lambda_align), "guidance.lambda_align",
            "must be finite and >= 0");
    guidance.layers(model.depth);
    require(!guidance.stop_step || *guidance.stop_step >= 0, "guidance.stop_step", "must be >= 0");
    require(guidance.stop_epochs >= 0.0 && std::isfinite(guidance.stop_epochs), "guidance.stop_epochs",
            "must be finite and >= 0");
    require(!guidance.teacher_steps || *guidance.teacher_steps >= 1, "guidance.teacher_steps", "must be >= 1");
    require(guidance.teacher_epochs > 0.0 && std::isfinite(guidance.teacher_epochs), "guidance.teacher_epochs",
            "must be finite and > 0");
    require(guidance.head_hidden >= 0, "guidance.head_hidden", "must be >= 0");

    require(optimizer.lr > 0.0 && std::isfinite(optimizer.lr), "optimizer.lr", "must be finite and > 0");
    require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1", "must lie in [0, 1)");
    require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2", "must lie in [0, 1)");
    require(optimizer.eps > 0.0, "optimizer.eps", "must be > 0");
    require(optimizer.weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0");

    require(!train.total_steps || *train.total_steps >= 1, "train.total_steps", "must be >= 1");
    require(train.total_epochs > 0.0 && std::isfinite(train.total_epochs), "train.total_epochs",
            "must be finite and > 0");
    require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
    require(train.ema_decay >= 0.0 && train.ema_decay <= 1.0, "train.ema_decay", "must lie in [0, 1]");
    require(train.checkpoint_every >= 1, "train.checkpoint_every", "must be >= 1");
    require(train.log_every >= 1, "train.log_every", "must be >= 1");
    if (train.total_steps && guidance.stop_step)
        require(*guidance.stop_step <= *train.total_steps, "guidance.stop_step",
                "exceeds train.total_steps (" + std::to_string(*train.total_steps) + ")");

    require(sample.num_steps >= 1, "sample.num_steps", "must be >= 1");
    require(sample.cfg_scale >= 0.0 && std::isfinite(sample.cfg_scale), "sample.cfg_scale", "must be finite and >= 0");
    require(sample.batch_size >= 1, "sample.batch_size", "must be >= 1");

    require(eval.num_samples >= 2, "eval.num_samples", "must be >= 2");
    require(eval.feature_t >= 0.0 && eval.feature_t <= 1.0, "eval.feature_t", "must lie in [0, 1]");
    require(eval.silhouette_batch >= 2, "eval.silhouette_batch", "must be >= 2");
    require(eval.embedder_steps >= 1, "eval.embedder_steps", "must be >= 1");
    require(eval.embedder_batch_size >= 1, "eval.embedder_batch_size", "must be >= 1");
    require(eval.embedder_lr > 0.0, "eval.embedder_lr", "must be > 0");
    require(eval.embedder_feature_dim >= 1, "eval.embedder_feature_dim", "must be >= 1");
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.depth = model.depth;
    m.hidden_dim = model.hidden_dim;
    m.heads = model.heads;
    m.patch_size = model.patch_size;
    m.latent_channels = codec.latent_channels;
    m.latent_size = codec.downsample_factor > 0 ? dataset.image_size / codec.downsample_factor : 0;
    m.num_classes = dataset.num_classes;
    m.cond_dropout_prob = model.cond_dropout_prob;
    m.mlp_ratio = model.mlp_ratio;
    m.freq_dim = model.freq_dim;
    return m;
}

CodecConfig RunConfig::codec_config() const {
    CodecConfig c;
    c.image_size = dataset.image_size;
    c.downsample_factor = codec.downsample_factor;
    c.latent_channels = codec.latent_channels;
    c.kl_weight = codec.kl_weight;
    c.base_channels = codec.base_channels;
    return c;
}

CodecTrainOptions RunConfig::codec_train_options() const {
    CodecTrainOptions o;
    o.steps = codec.steps;
    o.batch_size = codec.batch_size;
    o.lr = codec.lr;
    o.seed = seed;
    return o;
}

fs::path RunConfig::codec_path() const {
    return codec.checkpoint.empty() ? fs::path(output_dir) / "codec" : fs::path(codec.checkpoint);
}

fs::path RunConfig::guide_path() const {
    return guidance.guide_checkpoint.empty() ? fs::path(output_dir) / "guide" / "checkpoint"
                                             : fs::path(guidance.guide_checkpoint);
}

fs::path RunConfig::embedder_path() const {
    return eval.embedder.empty() ? fs::path(output_dir) / "embedder" : fs::path(eval.embedder);
}

RunConfig run_config_from_tree(const json& tree) {
    if (!tree.is_object()) throw ConfigError("config: top level must be a table");
    RunConfig cfg;
    bind_tree(cfg, tree, "");
    cfg.validate();
    return cfg;
}

void apply_overrides(json& tree, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + o + ": expected key=value");
        const std::string key = o.substr(0, eq);
        json* node = &tree;
        std::size_t start = 0;
        for (;;) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (part.empty()) throw ConfigError("--set " + o + ": malformed key");
            if (dot == std::string::npos) {
                (*node)[part] = parse_toml_value_lenient(o.substr(eq + 1));
                break;
            }
            json& next = (*node)[part];
            if (next.is_null()) next = json::object();
            if (!next.is_object()) throw ConfigError(key.substr(0, dot) + ": is a value, not a table");
            node = &next;
            start = dot + 1;
        }
    }
}

RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
    json tree = parse_toml(text);
    apply_overrides(tree, overrides);
    return run_config_from_tree(tree);
}

RunConfig parse_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), overrides);
}

std::string serialize_config(const RunConfig& config) {
    std::string out;
    std::string section;
    for (const auto& f : schema()) {
        const auto value = f.get(config);
        if (!value) continue;
        const auto dot = f.key.find('.');
        const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
        const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
        if (sec != section) {
            out += "\n[" + sec + "]\n";
            section = sec;
        }
        out += name + " = " + format_value(*value) + "\n";
    }
    return out;
}

json config_to_json(const RunConfig& config) {
    json out = json::object();
    for (const auto& f : schema()) {
        const auto value = f.get(config);
        if (!value) continue;
        const auto dot = f.key.find('.');
        if (dot == std::string::npos)
            out[f.key] = *value;
        else
            out[f.key.substr(0, dot)][f.key.substr(dot + 1)] = *value;
    }
    return out;
}

std::string config_hash(const RunConfig& config) {
    const std::string text = serialize_config(config);
    return sha256_hex(text.data(), text.size());
}

}  // namespace st
