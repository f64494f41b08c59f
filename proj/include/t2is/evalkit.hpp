#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "t2is/clients.hpp"
#include "t2is/error.hpp"
#include "t2is/tensor.hpp"

namespace t2is {

class CriteriaError : public Error {
public:
    using Error::Error;
};

// A set of fewer than two images has no pairs to compare.
class UndefinedConsistencyError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

enum class Dimension { identity, style, logic, entity, attribute, relation };

const char* dimension_name(Dimension d);
Dimension dimension_from_name(const std::string& name);  // throws ValidationError
bool is_consistency_dimension(Dimension d);

struct Criterion {
    Dimension dimension = Dimension::identity;
    std::string question;
    std::optional<std::size_t> image;  // alignment only

    // Non-empty question ending in '?'. Throws ValidationError.
    void validate() const;
};

inline constexpr std::size_t kMinCriteria = 2;
inline constexpr std::size_t kMaxCriteria = 4;

using Warn = std::function<void(const std::string&)>;

// Asks the model for 2–4 Yes/No questions. Invalid questions are dropped;
// more than 4 are cut to 4 with a warning. One retry when the reply is not
// JSON or has fewer than 2 valid questions, then CriteriaError.
//
// `subject` is the instruction for consistency dimensions and the image's own
// prompt for alignment ones; `image` tags alignment criteria.
std::vector<Criterion> generate_criteria(const std::string& subject, Dimension dimension, ChatClient& client,
                                         const std::string& model = {}, std::optional<std::size_t> image = {},
                                         const Warn& warn = {});

// [(0,1), (1,2), ..., (n-2, n-1)].
std::vector<std::pair<std::size_t, std::size_t>> sequential_pairs(std::size_t n);

inline constexpr std::size_t kEvalSide = 512;

// Bilinear resampling to side × side with half-pixel centres, clamped to [0, 1].
// An image already at that size is returned unchanged.
Tensor resize_for_eval(const Tensor& image, std::size_t side = kEvalSide);

struct CellScores {
    double score = 0.0;
    std::vector<std::vector<double>> cells;  // [pair or image][criterion]
};

// One Yes/No chat per (pair, criterion) with both images attached; the score
// is the mean of every cell. Errors carry the cell that raised them.
CellScores consistency_dimension_score(const std::vector<Tensor>& images, const std::vector<Criterion>& criteria,
                                       ChatClient& client, const std::string& model = {});

// Mean yes-probability of one image over its criteria.
double alignment_score(const Tensor& image, std::size_t index, const std::vector<Criterion>& criteria,
                       ChatClient& client, const std::string& model = {});
// Mean over images of alignment_score; criteria[i] belongs to image i.
CellScores alignment_perspective_score(const std::vector<Tensor>& images,
                                       const std::vector<std::vector<Criterion>>& criteria, ChatClient& client,
                                       const std::string& model = {});

// The Yes/No question text sent for a cell.
std::string pair_question(std::size_t first, std::size_t second, const std::string& question);
std::string image_question(std::size_t index, const std::string& question);

class AestheticsScorer {
public:
    virtual ~AestheticsScorer() = default;
    virtual double score(const Tensor& image, std::size_t index) = 0;
};

// Canned per-image scores, by position in the set.
class FixtureAesthetics : public AestheticsScorer {
public:
    explicit FixtureAesthetics(std::vector<double> scores) : scores_(std::move(scores)) {}
    double score(const Tensor& image, std::size_t index) override;

private:
    std::vector<double> scores_;
};

// POST <base>/score with {"image": "<base64 PNG>"}; expects {"score": s}, s in [0, 1].
class HttpAesthetics : public AestheticsScorer {
public:
    HttpAesthetics(EndpointConfig config, std::unique_ptr<Transport> transport);
    double score(const Tensor& image, std::size_t index) override;

private:
    EndpointConfig config_;
    std::unique_ptr<Transport> transport_;
    std::string path_;
};

// Mean per-image score. Throws ValidationError for an empty set and
// ScoringError for a score outside [0, 1].
double aesthetics_score(const std::vector<Tensor>& images, AestheticsScorer& scorer);

struct ScoreReport {
    double aesthetics = 0.0;
    std::array<double, 3> alignment{};    // entity, attribute, relation
    std::array<double, 3> consistency{};  // identity, style, logic
    double holistic = 0.0;
};

inline constexpr int kReportSchemaVersion = 1;

// 0.2·aesthetics + 0.3·mean(alignment) + 0.5·mean(consistency). Throws
// ValidationError for inputs outside [0, 1].
double holistic(double aesthetics, const std::array<double, 3>& alignment, const std::array<double, 3>& consistency);
ScoreReport make_report(double aesthetics, const std::array<double, 3>& alignment,
                        const std::array<double, 3>& consistency);

nlohmann::json report_to_json(const ScoreReport& report);
ScoreReport report_from_json(const nlohmann::json& j);
// Aesthetics | Entity Attribute Relation | Identity Style Logic | Avg, three decimals.
std::string report_table(const std::vector<std::pair<std::string, ScoreReport>>& rows);

// Full evaluation of one set: criteria for every dimension, pair scoring,
// per-image alignment against prompts[i] (or the instruction when
// align_to_instruction is set), aesthetics, aggregate.
struct EvalOptions {
    std::string model;
    bool align_to_instruction = false;
    Warn warn;
};
struct EvalResult {
    ScoreReport report;
    std::vector<Criterion> consistency_criteria;
    std::vector<std::vector<Criterion>> alignment_criteria;  // per image
};
EvalResult evaluate_set(const std::vector<Tensor>& images, const std::string& instruction,
                        const std::vector<std::string>& prompts, ChatClient& client, AestheticsScorer& aesthetics,
                        const EvalOptions& options = {});

// ---- colour-histogram consistency proxy ---------------------------------

inline constexpr double kForegroundThreshold = 0.3;
inline constexpr std::size_t kHistogramBins = 4;  // per channel

// Normalised joint RGB histogram (bins³ entries) over pixels whose brightest
// channel exceeds the threshold. Empty when no pixel qualifies.
std::vector<double> color_histogram(const Tensor& image, double threshold = kForegroundThreshold,
                                    std::size_t bins = kHistogramBins);
// Total-variation distance in [0, 1]; 1 when either histogram is empty.
double histogram_distance(const std::vector<double>& a, const std::vector<double>& b);
// Mean distance over all unordered pairs.
double set_color_distance(const std::vector<Tensor>& images);

}  // namespace t2is
