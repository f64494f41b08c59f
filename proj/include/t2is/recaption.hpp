#pragma once

#include <optional>
#include <string>
#include <vector>

#include "t2is/clients.hpp"

namespace t2is {

inline constexpr std::size_t kMaxSetSize = 8;

struct Instruction {
    std::string text;
    std::optional<std::size_t> set_size;  // explicit n; otherwise parsed from the text
};

// S = {E, C}.
struct StructuredInstruction {
    std::vector<std::string> entities;
    std::vector<std::string> consistency;
};

struct RecaptionResult {
    std::vector<std::string> entities;
    std::vector<std::string> consistency;
    std::vector<std::string> prompts;  // p_i, one per entity
    std::string global;                // g; empty means unconstrained
};

// "generate 4 images", "a set of three pictures", ... Returns nullopt when
// the text names no count.
std::optional<std::size_t> parse_set_size(const std::string& text);

// Template fallback.
//
// Clauses are split on . ; ! ? and newlines, and before numbered list
// markers ("1." / "2)"). A clause opening with an ordinal ("the first image
// shows", "second:", "image 3 -", a list marker) contributes its remainder
// to E. Any other clause containing a consistency keyword (same, consistent,
// consistency, consistently, style, identity, uniform, unified) goes to C.
// Everything else is dropped.
StructuredInstruction parse_instruction_fallback(const std::string& text);

// Strict {"entities": [...], "consistency": [...]} object. One repair pass
// strips a code fence or surrounding prose. Throws ParseError.
StructuredInstruction parse_structured_json(const std::string& reply);

// Pulls the first balanced JSON object out of a reply, unwrapping a
// ```json fence. Returns nullopt when there is none.
std::optional<std::string> extract_json_object(const std::string& reply);

class Recaptioner {
public:
    // Deterministic template mode.
    Recaptioner() = default;
    // Client mode; model may be empty to use the endpoint default.
    explicit Recaptioner(ChatClient& client, std::string model = {});

    bool uses_client() const { return client_ != nullptr; }

    // Throws SizeError when |E| differs from the requested n, ValidationError
    // when no n is known and nothing was enumerated or n is outside 1..8,
    // ParseError on malformed client output after the retry.
    StructuredInstruction parse(const Instruction& instruction) const;
    // p_i. Template: e_i + ", " + join(C, ", ").
    std::string recap(const std::string& entity, const Instruction& instruction,
                      const std::vector<std::string>& consistency) const;
    // g. Template: join(C, ", "); empty for an empty C in both modes.
    std::string consist(const std::vector<std::string>& consistency, const Instruction& instruction) const;

    RecaptionResult run(const Instruction& instruction) const;

private:
    ChatClient* client_ = nullptr;
    std::string model_;
};

// Free text → toy prompt tokens: [shape, color], each the first keyword match
// (synonyms and plurals included); [null] when nothing matches.
std::vector<int> tokenize_for_toy(const std::string& text);

}  // namespace t2is
