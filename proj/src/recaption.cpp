#include "t2is/recaption.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <future>
#include <string_view>

#include "t2is/error.hpp"
#include "t2is/prompts.hpp"
#include "t2is/shapes.hpp"

namespace t2is {

namespace {

using nlohmann::json;

char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }
bool space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool digit(char c) { return c >= '0' && c <= '9'; }

std::string trim(std::string_view s, std::string_view extra = {}) {
    auto drop = [&](char c) { return space(c) || extra.find(c) != std::string_view::npos; };
    std::size_t b = 0, e = s.size();
    while (b < e && drop(s[b])) ++b;
    while (e > b && drop(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = lower(c);
    return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

struct Word {
    std::string text;  // lower case, trailing punctuation removed
    char trailing = 0;  // ':' ',' or '-' glued to the word, if any
    std::size_t begin = 0;
    std::size_t end = 0;
};

std::vector<Word> words_of(std::string_view s) {
    std::vector<Word> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && space(s[i])) ++i;
        if (i >= s.size()) break;
        Word w;
        w.begin = i;
        while (i < s.size() && !space(s[i])) ++i;
        w.end = i;
        std::string t = to_lower(s.substr(w.begin, w.end - w.begin));
        while (!t.empty() && (t.back() == ':' || t.back() == ',' || t.back() == '-')) {
            if (!w.trailing) w.trailing = t.back();
            t.pop_back();
        }
        w.text = std::move(t);
        out.push_back(std::move(w));
    }
    return out;
}

bool one_of(const std::string& w, std::initializer_list<std::string_view> set) {
    return std::find(set.begin(), set.end(), w) != set.end();
}

bool is_ordinal(const std::string& w) {
    return one_of(w, {"first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "1st", "2nd", "3rd",
                      "4th", "5th", "6th", "7th", "8th", "last", "final"});
}

bool is_image_noun(const std::string& w) {
    return one_of(w, {"image", "picture", "panel", "frame", "photo", "scene", "illustration", "shot", "one"});
}

bool is_small_number(const std::string& w) {
    return !w.empty() && w.size() <= 2 && std::all_of(w.begin(), w.end(), digit);
}

// Index of the first word after the enumerator, or -1 when the clause is not
// enumerated.
long enumerated_prefix(const std::vector<Word>& w) {
    std::size_t i = 0;
    auto at = [&](std::size_t k) -> const std::string& {
        static const std::string none;
        return k < w.size() ? w[k].text : none;
    };
    if (at(i) == "and" || at(i) == "then") ++i;
    if (at(i) == "in" || at(i) == "for") ++i;
    if (at(i) == "the") ++i;
    bool matched = false;
    if (is_ordinal(at(i))) {
        if (w[i].trailing == ':' || w[i].trailing == '-') return static_cast<long>(i + 1);
        if (is_image_noun(at(i + 1))) {
            i += 2;
            matched = true;
        } else if (at(i + 1) == ":" || at(i + 1) == "-") {
            return static_cast<long>(i + 2);
        }
    } else if (is_image_noun(at(i)) && at(i) != "one" && is_small_number(at(i + 1))) {
        i += 2;
        matched = true;
    }
    if (!matched) return -1;
    const std::size_t noun = i - 1;
    if (w[noun].trailing == ':' || w[noun].trailing == '-') return static_cast<long>(i);
    if (at(i) == ":" || at(i) == "-") return static_cast<long>(i + 1);
    if (at(i) == "should" || at(i) == "will" || at(i) == "must") {
        ++i;
        if (one_of(at(i), {"show", "depict", "contain", "feature", "present", "display", "be", "have"})) ++i;
    } else if (one_of(at(i), {"shows", "depicts", "contains", "features", "presents", "displays", "is", "has",
                              "showing", "depicting", "with"})) {
        ++i;
    }
    return static_cast<long>(i);
}

bool has_consistency_keyword(const std::vector<Word>& w) {
    for (const auto& x : w) {
        std::string t;
        for (char c : x.text)
            if (std::isalpha(static_cast<unsigned char>(c))) t += c;
        if (one_of(t, {"same", "consistent", "consistency", "consistently", "style", "identity", "uniform",
                       "unified"})) {
            return true;
        }
    }
    return false;
}

struct Clause {
    std::string text;
    bool listed = false;  // opened by a numbered list marker
};

// A numbered marker is 1–2 digits followed by '.' or ')' and whitespace, at
// the start of the text or after whitespace.
std::vector<Clause> split_clauses(const std::string& text) {
    std::vector<Clause> out;
    Clause cur;
    auto flush = [&] {
        cur.text = trim(cur.text);
        if (!cur.text.empty()) out.push_back(cur);
        cur = Clause{};
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (digit(c) && (i == 0 || space(text[i - 1]))) {
            std::size_t j = i;
            while (j < text.size() && digit(text[j]) && j - i < 3) ++j;
            if (j - i <= 2 && j + 1 < text.size() && (text[j] == '.' || text[j] == ')') && space(text[j + 1])) {
                flush();
                cur.listed = true;
                i = j;
                continue;
            }
        }
        if (c == '.' || c == ';' || c == '!' || c == '?' || c == '\n') {
            flush();
            continue;
        }
        cur.text += c;
    }
    flush();
    return out;
}

std::optional<std::size_t> number_word(const std::string& w) {
    static const std::array<std::string_view, 13> names = {"zero", "one",  "two", "three",  "four",   "five",  "six",
                                                           "seven", "eight", "nine", "ten", "eleven", "twelve"};
    for (std::size_t k = 0; k < names.size(); ++k)
        if (w == names[k]) return k;
    if (!w.empty() && w.size() <= 3 && std::all_of(w.begin(), w.end(), digit)) return std::stoul(w);
    return std::nullopt;
}

bool is_plural_image_noun(const std::string& w) {
    return one_of(w, {"images", "pictures", "panels", "frames", "photos", "scenes", "illustrations", "shots",
                      "image", "picture"});
}

std::vector<std::string> string_array(const json& j, const char* key) {
    if (!j.contains(key)) throw ParseError(std::string("structured instruction: missing \"") + key + "\"");
    const auto& a = j.at(key);
    if (!a.is_array()) throw ParseError(std::string("structured instruction: \"") + key + "\" must be an array");
    std::vector<std::string> out;
    for (const auto& v : a) {
        if (!v.is_string()) throw ParseError(std::string("structured instruction: \"") + key + "\" holds a non-string");
        out.push_back(trim(v.get<std::string>()));
    }
    return out;
}

StructuredInstruction structured_from(const json& j) {
    if (!j.is_object()) throw ParseError("structured instruction: expected a JSON object");
    StructuredInstruction s;
    s.entities = string_array(j, "entities");
    s.consistency = string_array(j, "consistency");
    for (const auto& e : s.entities)
        if (e.empty()) throw ParseError("structured instruction: empty entity");
    std::erase_if(s.consistency, [](const std::string& c) { return c.empty(); });
    return s;
}

std::string reply_text(ChatClient& client, const ChatRequest& req) {
    return trim(client.chat(req).text);
}

void check_range(std::size_t n) {
    if (n < 1 || n > kMaxSetSize) {
        throw ValidationError("instruction: set size " + std::to_string(n) + " outside 1.." + std::to_string(kMaxSetSize));
    }
}

}  // namespace

std::optional<std::size_t> parse_set_size(const std::string& text) {
    const auto w = words_of(text);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        const auto n = number_word(w[i].text);
        if (!n) continue;
        std::string next = w[i + 1].text;
        std::erase_if(next, [](char c) { return !std::isalpha(static_cast<unsigned char>(c)); });
        if (is_plural_image_noun(next) && (*n != 1 || next == "image" || next == "picture")) return n;
    }
    return std::nullopt;
}

StructuredInstruction parse_instruction_fallback(const std::string& text) {
    StructuredInstruction s;
    for (const auto& clause : split_clauses(text)) {
        const auto w = words_of(clause.text);
        if (w.empty()) continue;
        long start = enumerated_prefix(w);
        if (clause.listed && start < 0) start = 0;
        if (start >= 0) {
            const std::size_t from = static_cast<std::size_t>(start) < w.size() ? w[start].begin : clause.text.size();
            auto rest = trim(std::string_view(clause.text).substr(from), ":,-");
            if (!rest.empty()) s.entities.push_back(std::move(rest));
            continue;
        }
        if (has_consistency_keyword(w)) s.consistency.push_back(trim(clause.text, ",:-"));
    }
    return s;
}

std::optional<std::string> extract_json_object(const std::string& reply) {
    std::size_t pos = 0;
    if (const auto fence = reply.find("```"); fence != std::string::npos) pos = fence;
    const auto open = reply.find('{', pos);
    if (open == std::string::npos) return std::nullopt;
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = open; i < reply.size(); ++i) {
        const char c = reply[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') in_string = true;
        if (c == '{') ++depth;
        if (c == '}' && --depth == 0) return reply.substr(open, i - open + 1);
    }
    return std::nullopt;
}

StructuredInstruction parse_structured_json(const std::string& reply) {
    json j = json::parse(reply, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        const auto inner = extract_json_object(reply);
        if (!inner) throw ParseError("structured instruction: reply holds no JSON object");
        j = json::parse(*inner, nullptr, false);
        if (j.is_discarded()) throw ParseError("structured instruction: reply holds malformed JSON");
    }
    return structured_from(j);
}

Recaptioner::Recaptioner(ChatClient& client, std::string model) : client_(&client), model_(std::move(model)) {}

StructuredInstruction Recaptioner::parse(const Instruction& instruction) const {
    if (trim(instruction.text).empty()) throw ValidationError("instruction: empty text");
    std::optional<std::size_t> n = instruction.set_size ? instruction.set_size : parse_set_size(instruction.text);
    if (n) check_range(*n);

    StructuredInstruction s;
    if (!client_) {
        s = parse_instruction_fallback(instruction.text);
    } else {
        ChatRequest req;
        req.model = model_;
        req.max_tokens = 1024;
        req.messages.push_back({"system", std::string(prompt_asset("parse.v1")), {}});
        std::string user = "Instruction:\n" + instruction.text;
        if (n) user += "\n\nNumber of images: " + std::to_string(*n);
        req.messages.push_back({"user", user, {}});
        const std::string first = reply_text(*client_, req);
        try {
            s = parse_structured_json(first);
        } catch (const ParseError&) {
            req.messages.push_back({"assistant", first, {}});
            req.messages.push_back(
                {"user", "That reply was not the required JSON object. Reply with the JSON object only.", {}});
            try {
                s = parse_structured_json(reply_text(*client_, req));
            } catch (const ParseError& e) {
                throw ParseError(std::string("recaption: malformed model output after retry: ") + e.what());
            }
        }
    }

    if (n) {
        if (s.entities.size() != *n) {
            throw SizeError("instruction: asked for " + std::to_string(*n) + " images but found " +
                            std::to_string(s.entities.size()) + " image descriptions");
        }
    } else {
        if (s.entities.empty()) {
            throw ValidationError("instruction: no set size given and no per-image enumeration found");
        }
        check_range(s.entities.size());
    }
    return s;
}

std::string Recaptioner::recap(const std::string& entity, const Instruction& instruction,
                               const std::vector<std::string>& consistency) const {
    if (trim(entity).empty()) throw ValidationError("recap: empty image description");
    if (!client_) return consistency.empty() ? entity : entity + ", " + join(consistency, ", ");
    ChatRequest req;
    req.model = model_;
    req.messages.push_back({"system", std::string(prompt_asset("recap.v1")), {}});
    std::string user = "Instruction:\n" + instruction.text + "\n\nThis image: " + entity + "\nRequirements:";
    for (const auto& c : consistency) user += "\n- " + c;
    if (consistency.empty()) user += " none";
    req.messages.push_back({"user", user, {}});
    auto p = reply_text(*client_, req);
    if (p.empty()) throw ParseError("recap: model returned an empty prompt");
    return p;
}

std::string Recaptioner::consist(const std::vector<std::string>& consistency, const Instruction& instruction) const {
    if (consistency.empty()) return {};
    if (!client_) return join(consistency, ", ");
    ChatRequest req;
    req.model = model_;
    req.messages.push_back({"system", std::string(prompt_asset("consist.v1")), {}});
    std::string user = "Instruction:\n" + instruction.text + "\n\nRequirements:";
    for (const auto& c : consistency) user += "\n- " + c;
    req.messages.push_back({"user", user, {}});
    auto g = reply_text(*client_, req);
    if (g.empty()) throw ParseError("consist: model returned an empty global prompt");
    return g;
}

RecaptionResult Recaptioner::run(const Instruction& instruction) const {
    const auto s = parse(instruction);
    RecaptionResult r;
    r.entities = s.entities;
    r.consistency = s.consistency;
    if (client_) {
        std::vector<std::future<std::string>> jobs;
        for (const auto& e : s.entities)
            jobs.push_back(std::async(std::launch::async, [&, e] { return recap(e, instruction, s.consistency); }));
        for (auto& j : jobs) r.prompts.push_back(j.get());
    } else {
        for (const auto& e : s.entities) r.prompts.push_back(recap(e, instruction, s.consistency));
    }
    r.global = consist(s.consistency, instruction);
    return r;
}

std::vector<int> tokenize_for_toy(const std::string& text) {
    struct Entry {
        std::string_view word;
        int token;
    };
    const int sq = vocab::shape_token(ShapeKind::square), ci = vocab::shape_token(ShapeKind::circle),
              tr = vocab::shape_token(ShapeKind::triangle);
    const int re = vocab::color_token(ColorKind::red), gr = vocab::color_token(ColorKind::green),
              bl = vocab::color_token(ColorKind::blue);
    const Entry shapes[] = {{"square", sq}, {"box", sq},    {"block", sq},    {"circle", ci},  {"disc", ci},
                            {"disk", ci},   {"ball", ci},   {"dot", ci},      {"triangle", tr}, {"pyramid", tr}};
    const Entry colors[] = {{"red", re},     {"crimson", re}, {"scarlet", re}, {"ruby", re},     {"maroon", re},
                            {"green", gr},   {"emerald", gr}, {"lime", gr},    {"olive", gr},    {"jade", gr},
                            {"blue", bl},    {"azure", bl},   {"navy", bl},    {"cobalt", bl},   {"sapphire", bl}};
    auto lookup = [](const auto& table, const std::string& w) -> int {
        for (const auto& e : table) {
            if (w == e.word) return e.token;
            if (w.size() == e.word.size() + 1 && w.back() == 's' && w.compare(0, e.word.size(), e.word) == 0) {
                return e.token;
            }
            if (w.size() == e.word.size() + 2 && w.ends_with("es") && w.compare(0, e.word.size(), e.word) == 0) {
                return e.token;
            }
        }
        return 0;
    };
    int shape = 0, color = 0;
    std::string w;
    auto flush = [&] {
        if (w.empty()) return;
        if (!shape) shape = lookup(shapes, w);
        if (!color) color = lookup(colors, w);
        w.clear();
    };
    for (char c : text) {
        if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) {
            w += lower(c);
        } else {
            flush();
        }
    }
    flush();
    std::vector<int> out;
    if (shape) out.push_back(shape);
    if (color) out.push_back(color);
    if (out.empty()) out.push_back(vocab::null_token);
    return out;
}

}  // namespace t2is
