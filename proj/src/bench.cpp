#include "t2is/bench.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "t2is/rng.hpp"

namespace t2is {

namespace {

using nlohmann::json;

constexpr TaskGroup kGroups[] = {TaskGroup::character, TaskGroup::design_style, TaskGroup::story,
                                 TaskGroup::process, TaskGroup::instruction};

const json& field(const json& obj, const std::string& where, const char* name, json::value_t type) {
    if (!obj.contains(name)) throw SchemaError(where, name, "missing");
    const auto& v = obj.at(name);
    const bool ok = type == json::value_t::number_unsigned ? v.is_number_integer() : v.type() == type;
    if (!ok) {
        throw SchemaError(where, name, std::string("expected ") +
                                           (type == json::value_t::string ? "a string" : "an integer"));
    }
    return v;
}

Task task_from_json(const json& obj, const std::string& where) {
    if (!obj.is_object()) throw SchemaError(where, "*", "expected an object");
    const auto version = field(obj, where, "schema_version", json::value_t::number_unsigned).get<long long>();
    if (version != kCorpusSchemaVersion) {
        throw SchemaError(where, "schema_version", "unsupported version " + std::to_string(version));
    }
    for (const auto& [k, v] : obj.items()) {
        static const char* known[] = {"schema_version", "id", "group", "subcategory", "instruction", "set_size",
                                      "source"};
        if (std::find(std::begin(known), std::end(known), k) == std::end(known)) {
            throw SchemaError(where, k, "unknown field");
        }
    }
    Task t;
    t.id = field(obj, where, "id", json::value_t::string).get<std::string>();
    try {
        t.group = group_from_name(field(obj, where, "group", json::value_t::string).get<std::string>());
    } catch (const SchemaError&) {
        throw;
    } catch (const ValidationError& e) {
        throw SchemaError(where, "group", e.what());
    }
    t.subcategory = field(obj, where, "subcategory", json::value_t::string).get<std::string>();
    t.instruction = field(obj, where, "instruction", json::value_t::string).get<std::string>();
    const auto n = field(obj, where, "set_size", json::value_t::number_unsigned).get<long long>();
    if (n < 0) throw SchemaError(where, "set_size", "must be in 2..8, got " + std::to_string(n));
    t.set_size = static_cast<std::size_t>(n);
    t.source = field(obj, where, "source", json::value_t::string).get<std::string>();
    validate_task(t, where);
    return t;
}

json task_to_json(const Task& t) {
    return {{"schema_version", kCorpusSchemaVersion},
            {"id", t.id},
            {"group", group_name(t.group)},
            {"subcategory", t.subcategory},
            {"instruction", t.instruction},
            {"set_size", t.set_size},
            {"source", t.source}};
}

}  // namespace

const char* group_name(TaskGroup g) {
    switch (g) {
        case TaskGroup::character: return "Character Generation";
        case TaskGroup::design_style: return "Design Style Generation";
        case TaskGroup::story: return "Story Generation";
        case TaskGroup::process: return "Process Generation";
        case TaskGroup::instruction: return "Instruction Generation";
    }
    return "?";
}

TaskGroup group_from_name(const std::string& name) {
    for (auto g : kGroups)
        if (name == group_name(g)) return g;
    throw ValidationError("unknown group '" + name + "'");
}

const std::vector<std::string>& subcategories(TaskGroup g) {
    static const std::map<TaskGroup, std::vector<std::string>> table{
        {TaskGroup::character, {"Multi-Scenario", "Multi-Expression", "Multi-View", "Multi-Pose", "Portrait Design"}},
        {TaskGroup::design_style, {"Creative Style", "Poster Design", "Font Design", "IP Product", "Home Decoration"}},
        {TaskGroup::story,
         {"Movie Shot", "Comic Story", "Children Book", "News Illustration", "Historical Narrative"}},
        {TaskGroup::process,
         {"Growth Process", "Draw Process", "Cooking Process", "Physical Law", "Architecture Building",
          "Evolution Illustration"}},
        {TaskGroup::instruction,
         {"Education Illustration", "Historical Panel", "Product Panel", "Travel Guide", "Activity Arrange"}},
    };
    return table.at(g);
}

std::size_t word_count(const std::string& text) {
    std::istringstream in(text);
    std::size_t n = 0;
    for (std::string w; in >> w;) ++n;
    return n;
}

void validate_task(const Task& t, const std::string& where) {
    if (t.id.empty()) throw SchemaError(where, "id", "must be non-empty");
    const auto& subs = subcategories(t.group);
    if (std::find(subs.begin(), subs.end(), t.subcategory) == subs.end()) {
        throw SchemaError(where, "subcategory",
                          "'" + t.subcategory + "' is not a subcategory of " + group_name(t.group));
    }
    if (t.set_size < 2 || t.set_size > 8) {
        throw SchemaError(where, "set_size", "must be in 2..8, got " + std::to_string(t.set_size));
    }
    const auto words = word_count(t.instruction);
    if (words < kMinTaskWords || words > kMaxTaskWords) {
        throw SchemaError(where, "instruction",
                          "word count " + std::to_string(words) + " outside [20, 175]");
    }
    if (t.source.empty()) throw SchemaError(where, "source", "must be non-empty");
}

std::vector<Task> parse_corpus(const std::string& text, const std::string& name) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(name + ": " + e.what());
    }
    if (!j.is_array()) throw ValidationError(name + ": expected a JSON array of tasks");
    std::vector<Task> out;
    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string where = name + ": [" + std::to_string(i) + "]";
        out.push_back(task_from_json(j[i], where));
        const auto [it, fresh] = seen.emplace(out.back().id, i);
        if (!fresh) {
            throw SchemaError(where, "id",
                              "duplicate id '" + out.back().id + "' in records [" + std::to_string(it->second) +
                                  "] and [" + std::to_string(i) + "]");
        }
    }
    return out;
}

std::string serialize_corpus(const std::vector<Task>& tasks) {
    json j = json::array();
    for (const auto& t : tasks) j.push_back(task_to_json(t));
    return j.dump(2) + "\n";
}

std::vector<Task> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("corpus: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_corpus(buf.str(), path);
}

void save_corpus(const std::string& path, const std::vector<Task>& tasks) {
    for (std::size_t i = 0; i < tasks.size(); ++i) validate_task(tasks[i], path + ": [" + std::to_string(i) + "]");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("corpus: cannot open " + path + " for writing");
    out << serialize_corpus(tasks);
    if (!out) throw Error("corpus: write failed for " + path);
}

CorpusStats corpus_stats(const std::vector<Task>& tasks) {
    if (tasks.empty()) throw ValidationError("corpus stats: empty corpus");
    CorpusStats s;
    s.tasks = tasks.size();
    double sizes = 0, words = 0;
    for (const auto& t : tasks) {
        sizes += static_cast<double>(t.set_size);
        words += static_cast<double>(word_count(t.instruction));
        ++s.per_group[group_name(t.group)];
        ++s.per_subcategory[t.subcategory];
        ++s.per_set_size[t.set_size];
    }
    s.mean_set_size = sizes / static_cast<double>(tasks.size());
    s.mean_word_count = words / static_cast<double>(tasks.size());
    return s;
}

std::string stats_to_json(const CorpusStats& s) {
    json j{{"tasks", s.tasks},
           {"mean_set_size", s.mean_set_size},
           {"mean_word_count", s.mean_word_count},
           {"per_group", s.per_group},
           {"per_subcategory", s.per_subcategory}};
    json sizes = json::object();
    for (const auto& [k, v] : s.per_set_size) sizes[std::to_string(k)] = v;
    j["per_set_size"] = sizes;
    return j.dump(2);
}

std::vector<Task> synth_tasks(std::uint64_t seed, std::size_t count) {
    static const char* numbers[] = {"", "", "two", "three", "four", "five"};
    static const char* ordinals[] = {"first", "second", "third", "fourth", "fifth"};
    static const char* shapes[] = {"square", "circle", "triangle"};
    static const char* colors[] = {"red", "green", "blue"};
    Rng rng(seed, 0x7a5c);
    std::vector<Task> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t n = 2 + rng.below(4);
        const char* color = colors[rng.below(3)];
        std::string text = std::string("Generate ") + numbers[n] +
                           " images of simple flat shapes on a plain black background.";
        for (std::size_t k = 0; k < n; ++k) {
            text += std::string(" The ") + ordinals[k] + " image shows a " + shapes[rng.below(3)] + ".";
        }
        text += std::string(" Keep the same ") + color + " color in every image so the set looks consistent.";
        char id[48];
        std::snprintf(id, sizeof id, "synth-%llu-%03zu", static_cast<unsigned long long>(seed), i);
        Task t{id, TaskGroup::design_style, "Creative Style", text, n, "synthetic"};
        validate_task(t, "synth");
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace t2is
