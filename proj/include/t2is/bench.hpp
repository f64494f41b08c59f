#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "t2is/error.hpp"

namespace t2is {

// Schema violation in a corpus file. `where` is "<file>: [index]".
class SchemaError : public ValidationError {
public:
    SchemaError(const std::string& where, const std::string& field, const std::string& problem)
        : ValidationError(where + "." + field + ": " + problem), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

enum class TaskGroup { character, design_style, story, process, instruction };

// "Character Generation", "Design Style Generation", ...
const char* group_name(TaskGroup g);
TaskGroup group_from_name(const std::string& name);  // throws ValidationError

// The subcategory names of each group, in documentation order (26 total).
const std::vector<std::string>& subcategories(TaskGroup g);

inline constexpr int kCorpusSchemaVersion = 1;
inline constexpr std::size_t kMinTaskWords = 20;
inline constexpr std::size_t kMaxTaskWords = 175;

struct Task {
    std::string id;
    TaskGroup group = TaskGroup::character;
    std::string subcategory;
    std::string instruction;
    std::size_t set_size = 2;
    std::string source;

    bool operator==(const Task&) const = default;
};

// Whitespace-separated tokens.
std::size_t word_count(const std::string& text);

// Throws SchemaError naming `where` and the offending field.
void validate_task(const Task& task, const std::string& where = "task");

// JSON array of task objects, each carrying "schema_version". Duplicate ids
// are rejected with both record indices in the message.
std::vector<Task> parse_corpus(const std::string& text, const std::string& name = "corpus");
std::string serialize_corpus(const std::vector<Task>& tasks);
std::vector<Task> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<Task>& tasks);

struct CorpusStats {
    std::size_t tasks = 0;
    double mean_set_size = 0.0;
    double mean_word_count = 0.0;
    std::map<std::string, std::size_t> per_group;
    std::map<std::string, std::size_t> per_subcategory;
    std::map<std::size_t, std::size_t> per_set_size;
};

// Throws ValidationError for an empty corpus.
CorpusStats corpus_stats(const std::vector<Task>& tasks);
std::string stats_to_json(const CorpusStats& stats);

// Toy tasks over the shape vocabulary: n ∈ {2,3,4,5} images, one shape per
// image named in an enumerated clause, and a shared colour stated as a
// consistency requirement. Same seed, same tasks.
std::vector<Task> synth_tasks(std::uint64_t seed, std::size_t count);

}  // namespace t2is
