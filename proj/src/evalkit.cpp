#include "t2is/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <iostream>

#include "t2is/image_io.hpp"
#include "t2is/prompts.hpp"
#include "t2is/recaption.hpp"

namespace t2is {

namespace {

using nlohmann::json;

const char* dimension_brief(Dimension d) {
    switch (d) {
        case Dimension::identity:
            return "Do recurring subjects keep the same identity (face, body, clothing, distinctive features) across "
                   "the images?";
        case Dimension::style:
            return "Do the images share one visual style (medium, palette, lighting, rendering)?";
        case Dimension::logic:
            return "Do the images follow the logical or temporal progression the instruction asks for?";
        case Dimension::entity:
            return "Are the objects and characters named in the prompt present in this image?";
        case Dimension::attribute:
            return "Do the objects carry the attributes (colour, count, material, state) the prompt asks for?";
        case Dimension::relation:
            return "Are the spatial and semantic relations between objects as the prompt describes?";
    }
    return "";
}

std::vector<std::string> criteria_strings(const std::string& reply) {
    json j = json::parse(reply, nullptr, false);
    if (j.is_discarded()) {
        if (const auto inner = extract_json_object(reply)) j = json::parse(*inner, nullptr, false);
    }
    if (j.is_discarded()) throw ParseError("criteria: reply is not JSON");
    const json* arr = nullptr;
    if (j.is_array()) arr = &j;
    if (j.is_object() && j.contains("criteria") && j.at("criteria").is_array()) arr = &j.at("criteria");
    if (!arr) throw ParseError("criteria: expected {\"criteria\": [...]}");
    std::vector<std::string> out;
    for (const auto& v : *arr)
        if (v.is_string()) out.push_back(v.get<std::string>());
    return out;
}

std::vector<Criterion> valid_criteria(const std::vector<std::string>& questions, Dimension d,
                                      std::optional<std::size_t> image) {
    std::vector<Criterion> out;
    for (const auto& q : questions) {
        std::string t = q;
        while (!t.empty() && std::isspace(static_cast<unsigned char>(t.back()))) t.pop_back();
        while (!t.empty() && std::isspace(static_cast<unsigned char>(t.front()))) t.erase(t.begin());
        Criterion c{d, t, image};
        try {
            c.validate();
        } catch (const ValidationError&) {
            continue;
        }
        out.push_back(std::move(c));
    }
    return out;
}

template <typename F>
double scored_cell(const std::string& where, F&& f) {
    try {
        return f();
    } catch (const CapabilityError& e) {
        throw CapabilityError(where + ": " + e.what());
    } catch (const ExternalServiceError& e) {
        throw ExternalServiceError(where + ": " + e.what(), e.retryable(), e.status());
    } catch (const ScoringError& e) {
        throw ScoringError(where + ": " + e.what());
    }
}

double mean_of(const std::vector<std::vector<double>>& cells) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& row : cells)
        for (double v : row) {
            s += v;
            ++n;
        }
    return n ? s / static_cast<double>(n) : 0.0;
}

void check_unit(double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("score report: ") + what + " outside [0, 1]");
}

double px(const Tensor& t, std::size_t y, std::size_t x, std::size_t c) {
    return t[(y * t.dim(1) + x) * 3 + c];
}

std::vector<Rgb8> eval_rasters(const std::vector<Tensor>& images) {
    std::vector<Rgb8> out;
    for (const auto& im : images) out.push_back(to_rgb8(resize_for_eval(im)));
    return out;
}

}  // namespace

const char* dimension_name(Dimension d) {
    switch (d) {
        case Dimension::identity: return "identity";
        case Dimension::style: return "style";
        case Dimension::logic: return "logic";
        case Dimension::entity: return "entity";
        case Dimension::attribute: return "attribute";
        case Dimension::relation: return "relation";
    }
    return "?";
}

Dimension dimension_from_name(const std::string& name) {
    for (auto d : {Dimension::identity, Dimension::style, Dimension::logic, Dimension::entity, Dimension::attribute,
                   Dimension::relation})
        if (name == dimension_name(d)) return d;
    throw ValidationError("unknown dimension '" + name + "'");
}

bool is_consistency_dimension(Dimension d) {
    return d == Dimension::identity || d == Dimension::style || d == Dimension::logic;
}

void Criterion::validate() const {
    if (question.empty()) throw ValidationError("criterion: empty question");
    if (question.back() != '?') throw ValidationError("criterion: question must end with '?': " + question);
    if (image && is_consistency_dimension(dimension)) {
        throw ValidationError("criterion: consistency criteria do not target a single image");
    }
}

std::vector<Criterion> generate_criteria(const std::string& subject, Dimension dimension, ChatClient& client,
                                         const std::string& model, std::optional<std::size_t> image,
                                         const Warn& warn) {
    ChatRequest req;
    req.model = model;
    req.max_tokens = 1024;
    req.messages.push_back({"system", std::string(prompt_asset("criteria.v1")), {}});
    const char* label = is_consistency_dimension(dimension) ? "Instruction" : "Image prompt";
    req.messages.push_back({"user",
                            std::string(label) + ":\n" + subject + "\n\nDimension: " + dimension_name(dimension) +
                                "\n" + dimension_brief(dimension),
                            {}});

    std::vector<Criterion> found;
    std::string problem;
    for (int attempt = 0; attempt < 2; ++attempt) {
        const std::string reply = client.chat(req).text;
        try {
            found = valid_criteria(criteria_strings(reply), dimension, image);
            if (found.size() >= kMinCriteria) break;
            problem = "only " + std::to_string(found.size()) + " valid question(s)";
        } catch (const ParseError& e) {
            found.clear();
            problem = e.what();
        }
        req.messages.push_back({"assistant", reply, {}});
        req.messages.push_back({"user",
                                "Reply with only {\"criteria\": [...]} holding 2 to 4 Yes/No questions, each ending "
                                "with a question mark.",
                                {}});
    }
    if (found.size() < kMinCriteria) {
        throw CriteriaError(std::string("criteria for ") + dimension_name(dimension) + ": " + problem + " after retry");
    }
    if (found.size() > kMaxCriteria) {
        const std::string msg = std::string("criteria for ") + dimension_name(dimension) + ": model returned " +
                                std::to_string(found.size()) + " questions, keeping the first " +
                                std::to_string(kMaxCriteria);
        if (warn) {
            warn(msg);
        } else {
            std::cerr << "warning: " << msg << '\n';
        }
        found.resize(kMaxCriteria);
    }
    return found;
}

std::vector<std::pair<std::size_t, std::size_t>> sequential_pairs(std::size_t n) {
    if (n < 2) throw UndefinedConsistencyError("consistency is undefined for a set of " + std::to_string(n) + " image(s)");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i + 1 < n; ++i) out.emplace_back(i, i + 1);
    return out;
}

Tensor resize_for_eval(const Tensor& image, std::size_t side) {
    if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) == 0 || image.dim(1) == 0) {
        throw DimensionError("resize: expected an H × W × 3 image, got " + shape_str(image.shape()));
    }
    if (side == 0) throw ValidationError("resize: target side must be positive");
    const std::size_t h = image.dim(0), w = image.dim(1);
    if (h == side && w == side) return image;
    Tensor out({side, side, 3});
    auto axis = [side](std::size_t dst, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(n) / static_cast<double>(side) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(n - 1));
        i0 = static_cast<std::size_t>(std::floor(s));
        i1 = std::min(i0 + 1, n - 1);
        t = s - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < side; ++y) {
        std::size_t y0, y1;
        double ty;
        axis(y, h, y0, y1, ty);
        for (std::size_t x = 0; x < side; ++x) {
            std::size_t x0, x1;
            double tx;
            axis(x, w, x0, x1, tx);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = (1 - tx) * px(image, y0, x0, c) + tx * px(image, y0, x1, c);
                const double bot = (1 - tx) * px(image, y1, x0, c) + tx * px(image, y1, x1, c);
                out[(y * side + x) * 3 + c] = static_cast<float>(std::clamp((1 - ty) * top + ty * bot, 0.0, 1.0));
            }
        }
    }
    return out;
}

std::string pair_question(std::size_t first, std::size_t second, const std::string& question) {
    return "Image " + std::to_string(first + 1) + " and image " + std::to_string(second + 1) + " of the set. " +
           question;
}

std::string image_question(std::size_t index, const std::string& question) {
    return "Image " + std::to_string(index + 1) + " of the set. " + question;
}

CellScores consistency_dimension_score(const std::vector<Tensor>& images, const std::vector<Criterion>& criteria,
                                       ChatClient& client, const std::string& model) {
    const auto pairs = sequential_pairs(images.size());
    if (criteria.empty()) throw ValidationError("consistency score: no criteria");
    for (const auto& c : criteria) c.validate();
    const auto rasters = eval_rasters(images);
    std::vector<std::vector<std::future<double>>> jobs(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        for (std::size_t k = 0; k < criteria.size(); ++k) {
            jobs[p].push_back(std::async(std::launch::async, [&, p, k] {
                const auto [i, j] = pairs[p];
                const std::string where = std::string(dimension_name(criteria[k].dimension)) + " pair (" +
                                          std::to_string(i) + "," + std::to_string(j) + ") criterion " +
                                          std::to_string(k);
                return scored_cell(where, [&] {
                    return yes_probability(client.chat(yes_no_request(
                        model, pair_question(i, j, criteria[k].question), {rasters[i], rasters[j]})));
                });
            }));
        }
    }
    CellScores out;
    std::exception_ptr first_error;
    for (auto& row : jobs) {
        out.cells.emplace_back();
        for (auto& f : row) {
            try {
                out.cells.back().push_back(f.get());
            } catch (...) {
                if (!first_error) first_error = std::current_exception();
            }
        }
    }
    if (first_error) std::rethrow_exception(first_error);
    out.score = mean_of(out.cells);
    return out;
}

double alignment_score(const Tensor& image, std::size_t index, const std::vector<Criterion>& criteria,
                       ChatClient& client, const std::string& model) {
    if (criteria.empty()) throw ValidationError("alignment score: no criteria");
    const auto raster = to_rgb8(resize_for_eval(image));
    double sum = 0.0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        criteria[k].validate();
        const std::string where = std::string(dimension_name(criteria[k].dimension)) + " image " +
                                  std::to_string(index) + " criterion " + std::to_string(k);
        sum += scored_cell(where, [&] {
            return yes_probability(
                client.chat(yes_no_request(model, image_question(index, criteria[k].question), {raster})));
        });
    }
    return sum / static_cast<double>(criteria.size());
}

CellScores alignment_perspective_score(const std::vector<Tensor>& images,
                                       const std::vector<std::vector<Criterion>>& criteria, ChatClient& client,
                                       const std::string& model) {
    if (images.empty()) throw ValidationError("alignment score: no images");
    if (criteria.size() != images.size()) throw ValidationError("alignment score: one criteria list per image");
    std::vector<std::future<double>> jobs;
    for (std::size_t i = 0; i < images.size(); ++i)
        jobs.push_back(std::async(std::launch::async, [&, i] { return alignment_score(images[i], i, criteria[i], client, model); }));
    CellScores out;
    double sum = 0.0;
    std::exception_ptr first_error;
    for (auto& j : jobs) {
        try {
            const double v = j.get();
            out.cells.push_back({v});
            sum += v;
        } catch (...) {
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);
    out.score = sum / static_cast<double>(images.size());
    return out;
}

double FixtureAesthetics::score(const Tensor&, std::size_t index) {
    if (index >= scores_.size()) throw ScoringError("aesthetics fixture: no score for image " + std::to_string(index));
    return scores_[index];
}

HttpAesthetics::HttpAesthetics(EndpointConfig config, std::unique_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
    path_ = split_url(config_.base_url).path_prefix + "/score";
}

double HttpAesthetics::score(const Tensor& image, std::size_t index) {
    const json body{{"image", base64_encode(encode_png(to_rgb8(resize_for_eval(image))))}};
    std::map<std::string, std::string> headers;
    if (!config_.api_key.empty()) headers["Authorization"] = "Bearer " + config_.api_key;
    const auto reply = transport_->post(path_, body.dump(), headers);
    const std::string where = "aesthetics image " + std::to_string(index);
    if (reply.status < 200 || reply.status >= 300) {
        const bool retry = reply.status == 0 || reply.status == 429 || reply.status >= 500;
        throw ExternalServiceError(where + ": HTTP " + std::to_string(reply.status) + " " + reply.error, retry,
                                   reply.status);
    }
    const json j = json::parse(reply.body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("score") || !j.at("score").is_number()) {
        throw ExternalServiceError(where + ": response lacks a numeric \"score\"", false, reply.status);
    }
    return j.at("score").get<double>();
}

double aesthetics_score(const std::vector<Tensor>& images, AestheticsScorer& scorer) {
    if (images.empty()) throw ValidationError("aesthetics: empty image set");
    double sum = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const double s = scorer.score(images[i], i);
        if (!(s >= 0.0 && s <= 1.0)) {
            throw ScoringError("aesthetics image " + std::to_string(i) + ": score " + std::to_string(s) +
                               " outside [0, 1]");
        }
        sum += s;
    }
    return sum / static_cast<double>(images.size());
}

double holistic(double aesthetics, const std::array<double, 3>& alignment, const std::array<double, 3>& consistency) {
    check_unit(aesthetics, "aesthetics");
    for (double v : alignment) check_unit(v, "alignment");
    for (double v : consistency) check_unit(v, "consistency");
    const double align = (alignment[0] + alignment[1] + alignment[2]) / 3.0;
    const double cons = (consistency[0] + consistency[1] + consistency[2]) / 3.0;
    return 0.2 * aesthetics + 0.3 * align + 0.5 * cons;
}

ScoreReport make_report(double aesthetics, const std::array<double, 3>& alignment,
                        const std::array<double, 3>& consistency) {
    return {aesthetics, alignment, consistency, holistic(aesthetics, alignment, consistency)};
}

json report_to_json(const ScoreReport& r) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["aesthetics"] = r.aesthetics;
    j["alignment"] = {{"entity", r.alignment[0]}, {"attribute", r.alignment[1]}, {"relation", r.alignment[2]}};
    j["consistency"] = {{"identity", r.consistency[0]}, {"style", r.consistency[1]}, {"logic", r.consistency[2]}};
    j["holistic"] = r.holistic;
    return j;
}

ScoreReport report_from_json(const json& j) {
    try {
        if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
            throw ValidationError("score report: unsupported schema version");
        }
        const auto& a = j.at("alignment");
        const auto& c = j.at("consistency");
        ScoreReport r = make_report(
            j.at("aesthetics").get<double>(),
            {a.at("entity").get<double>(), a.at("attribute").get<double>(), a.at("relation").get<double>()},
            {c.at("identity").get<double>(), c.at("style").get<double>(), c.at("logic").get<double>()});
        if (std::abs(r.holistic - j.at("holistic").get<double>()) > 1e-9) {
            throw ValidationError("score report: holistic does not match its fields");
        }
        return r;
    } catch (const json::exception& e) {
        throw ParseError(std::string("score report: ") + e.what());
    }
}

std::string report_table(const std::vector<std::pair<std::string, ScoreReport>>& rows) {
    std::size_t name_w = 5;
    for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s | %10s | %6s %9s %8s | %8s %6s %6s | %6s\n", static_cast<int>(name_w), "Model",
                  "Aesthetics", "Entity", "Attribute", "Relation", "Identity", "Style", "Logic", "Avg.");
    out += buf;
    out += std::string(name_w, '-') + "-+-" + std::string(10, '-') + "-+-" + std::string(25, '-') + "-+-" +
           std::string(22, '-') + "-+-" + std::string(6, '-') + "\n";
    for (const auto& [name, r] : rows) {
        std::snprintf(buf, sizeof buf, "%-*s | %10.3f | %6.3f %9.3f %8.3f | %8.3f %6.3f %6.3f | %6.3f\n",
                      static_cast<int>(name_w), name.c_str(), r.aesthetics, r.alignment[0], r.alignment[1],
                      r.alignment[2], r.consistency[0], r.consistency[1], r.consistency[2], r.holistic);
        out += buf;
    }
    return out;
}

EvalResult evaluate_set(const std::vector<Tensor>& images, const std::string& instruction,
                        const std::vector<std::string>& prompts, ChatClient& client, AestheticsScorer& aesthetics,
                        const EvalOptions& options) {
    sequential_pairs(images.size());
    if (!options.align_to_instruction && prompts.size() != images.size()) {
        throw ValidationError("evaluate: one prompt per image required");
    }
    EvalResult res;
    std::array<double, 3> cons{}, align{};
    const Dimension cdims[] = {Dimension::identity, Dimension::style, Dimension::logic};
    for (std::size_t k = 0; k < 3; ++k) {
        auto crit = generate_criteria(instruction, cdims[k], client, options.model, std::nullopt, options.warn);
        cons[k] = consistency_dimension_score(images, crit, client, options.model).score;
        res.consistency_criteria.insert(res.consistency_criteria.end(), crit.begin(), crit.end());
    }
    const Dimension adims[] = {Dimension::entity, Dimension::attribute, Dimension::relation};
    res.alignment_criteria.resize(images.size());
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<std::vector<Criterion>> per_image;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const std::string& subject = options.align_to_instruction ? instruction : prompts[i];
            per_image.push_back(generate_criteria(subject, adims[k], client, options.model, i, options.warn));
            res.alignment_criteria[i].insert(res.alignment_criteria[i].end(), per_image.back().begin(),
                                             per_image.back().end());
        }
        align[k] = alignment_perspective_score(images, per_image, client, options.model).score;
    }
    res.report = make_report(aesthetics_score(images, aesthetics), align, cons);
    return res;
}

// ---- colour-histogram consistency proxy ---------------------------------

std::vector<double> color_histogram(const Tensor& image, double threshold, std::size_t bins) {
    if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("color histogram: expected an H × W × 3 image");
    if (bins == 0) throw ValidationError("color histogram: bins must be positive");
    std::vector<double> h(bins * bins * bins, 0.0);
    const std::size_t n = image.dim(0) * image.dim(1);
    double total = 0.0;
    auto bin = [bins](float v) {
        const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
        return std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    };
    for (std::size_t i = 0; i < n; ++i) {
        const float r = image[i * 3], g = image[i * 3 + 1], b = image[i * 3 + 2];
        if (std::max({r, g, b}) <= threshold) continue;
        h[(bin(r) * bins + bin(g)) * bins + bin(b)] += 1.0;
        total += 1.0;
    }
    if (total == 0.0) return {};
    for (auto& v : h) v /= total;
    return h;
}

double histogram_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) return 1.0;
    if (a.size() != b.size()) throw DimensionError("histogram distance: size mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return std::min(1.0, d / 2.0);
}

double set_color_distance(const std::vector<Tensor>& images) {
    if (images.size() < 2) throw UndefinedConsistencyError("color distance needs at least two images");
    std::vector<std::vector<double>> h;
    for (const auto& im : images) h.push_back(color_histogram(im));
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < h.size(); ++i)
        for (std::size_t j = i + 1; j < h.size(); ++j) {
            sum += histogram_distance(h[i], h[j]);
            ++count;
        }
    return sum / static_cast<double>(count);
}

}  // namespace t2is
