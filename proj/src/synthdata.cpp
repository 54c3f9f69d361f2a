#include "hbert/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include "hbert/errors.hpp"
#include "hbert/rng.hpp"

namespace hbert {

namespace {

std::vector<double> cumulative_weights(const std::vector<std::pair<std::string, double>>& emission) {
    std::vector<double> cum;
    cum.reserve(emission.size());
    double acc = 0.0;
    for (const auto& [code, w] : emission) {
        acc += w;
        cum.push_back(acc);
    }
    return cum;
}

void check_distribution(const std::vector<std::pair<std::string, double>>& emission,
                        const std::string& who) {
    if (emission.empty()) throw InvalidSpec(who + ": empty emission distribution");
    double total = 0.0;
    for (const auto& [code, w] : emission) {
        if (w < 0.0) throw InvalidSpec(who + ": negative weight for " + code);
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw InvalidSpec(who + ": emission weights sum to " + std::to_string(total));
    }
}

}  // namespace

void PhenotypeSpec::validate() const {
    if (prevalence <= 0.0 || prevalence > 1.0) {
        throw InvalidSpec("phenotype " + name + ": prevalence must be in (0, 1]");
    }
    if (visit_rate < 0.0) throw InvalidSpec("phenotype " + name + ": negative visit rate");
    check_distribution(dx_emission, "phenotype " + name + " dx");
    check_distribution(rx_emission, "phenotype " + name + " rx");
}

void CohortRule::validate() const {
    if (name.empty()) throw InvalidSpec("cohort rule without a name");
    if (dx_min_count < 1 || rx_min_count < 1) {
        throw InvalidSpec("cohort " + name + ": min counts must be >= 1");
    }
    for (const auto& code : inclusive_rx) {
        if (exclusive_rx.count(code)) {
            throw InvalidSpec("cohort " + name + ": '" + code +
                              "' is both inclusive and exclusive");
        }
    }
}

std::vector<EventRecord> generate_population(const std::vector<PhenotypeSpec>& specs,
                                             const PhenotypeSpec& background,
                                             std::size_t n_patients, std::uint64_t seed,
                                             const GenPolicy& policy) {
    if (specs.empty()) throw NoPhenotypes("generate_population: no phenotypes");
    for (const auto& s : specs) s.validate();
    background.validate();

    struct Tables {
        const PhenotypeSpec* spec;
        std::vector<double> dx_cum, rx_cum;
    };
    std::vector<Tables> tables;
    tables.reserve(specs.size() + 1);
    for (const auto& s : specs) {
        tables.push_back({&s, cumulative_weights(s.dx_emission), cumulative_weights(s.rx_emission)});
    }
    tables.push_back({&background, cumulative_weights(background.dx_emission),
                      cumulative_weights(background.rx_emission)});

    std::vector<EventRecord> events;
    for (std::size_t pid = 0; pid < n_patients; ++pid) {
        Rng rng(derive_seed(seed, "patient", pid));
        std::vector<const Tables*> members;
        for (std::size_t s = 0; s < specs.size(); ++s) {
            if (rng.bernoulli(specs[s].prevalence)) members.push_back(&tables[s]);
        }
        members.push_back(&tables.back());  // background applies to everyone
        for (const Tables* t : members) {
            const std::uint64_t n_visits = rng.poisson(t->spec->visit_rate);
            for (std::uint64_t v = 0; v < n_visits; ++v) {
                const auto date = static_cast<std::int32_t>(rng.uniform_index(policy.days));
                const std::uint64_t n_dx = rng.poisson(policy.dx_per_visit_mean);
                const std::uint64_t n_rx = rng.poisson(policy.rx_per_visit_mean);
                for (std::uint64_t i = 0; i < n_dx; ++i) {
                    events.push_back({static_cast<std::int64_t>(pid), date, SystemId::kDiagnosis,
                                      t->spec->dx_emission[rng.categorical(t->dx_cum)].first});
                }
                for (std::uint64_t i = 0; i < n_rx; ++i) {
                    events.push_back({static_cast<std::int64_t>(pid), date,
                                      SystemId::kPrescription,
                                      t->spec->rx_emission[rng.categorical(t->rx_cum)].first});
                }
            }
        }
    }
    return events;
}

std::vector<VisitRecord> group_and_filter_visits(const std::vector<EventRecord>& events) {
    std::map<std::pair<std::int64_t, std::int32_t>, VisitRecord> grouped;
    for (const EventRecord& e : events) {
        VisitRecord& v = grouped[{e.patient_id, e.date}];
        v.patient_id = e.patient_id;
        v.date = e.date;
        if (e.system == SystemId::kDiagnosis) {
            v.dx_codes.insert(e.code);
        } else {
            v.rx_codes.insert(e.code);
        }
    }
    std::vector<VisitRecord> visits;
    for (auto& [key, visit] : grouped) {
        if (!visit.dx_codes.empty() && !visit.rx_codes.empty()) {
            visits.push_back(std::move(visit));
        }
    }
    return visits;
}

std::map<std::int64_t, std::vector<std::uint8_t>> assign_category_labels(
    const std::vector<VisitRecord>& visits, const HierarchyTree& dx_tree) {
    const std::vector<std::string> chapters = dx_tree.tokens_at_depth(2);
    std::map<std::string, std::size_t> chapter_index;
    for (std::size_t i = 0; i < chapters.size(); ++i) chapter_index[chapters[i]] = i;

    std::map<std::int64_t, std::vector<std::uint8_t>> labels;
    for (const VisitRecord& visit : visits) {
        auto& bits = labels[visit.patient_id];
        if (bits.empty()) bits.assign(chapters.size(), 0);
        for (const auto& code : visit.dx_codes) {
            if (!dx_tree.contains(code)) continue;
            const SemanticPath path = decompose(code, dx_tree);
            if (path.tokens.size() < 2) continue;  // the root has no chapter
            bits[chapter_index.at(path.tokens[1])] = 1;
        }
    }
    return labels;
}

bool evaluate_cohort_rule(const std::vector<VisitRecord>& patient_visits, const CohortRule& rule) {
    std::size_t dx_count = 0, rx_count = 0;
    for (const VisitRecord& visit : patient_visits) {
        for (const auto& code : visit.dx_codes) {
            if (rule.inclusive_dx.count(code)) ++dx_count;
        }
        for (const auto& code : visit.rx_codes) {
            if (rule.exclusive_rx.count(code)) return false;
            if (rule.inclusive_rx.count(code)) ++rx_count;
        }
    }
    return dx_count >= rule.dx_min_count && rx_count >= rule.rx_min_count;
}

LabelSpace build_patient_labels(const std::vector<VisitRecord>& visits,
                                const HierarchyTree& dx_tree,
                                const std::vector<CohortRule>& cohorts) {
    LabelSpace space;
    space.task_names = dx_tree.tokens_at_depth(2);
    space.n_chapters = space.task_names.size();

    std::vector<CohortRule> sorted_cohorts = cohorts;
    std::sort(sorted_cohorts.begin(), sorted_cohorts.end(),
              [](const CohortRule& a, const CohortRule& b) { return a.name < b.name; });
    for (const auto& rule : sorted_cohorts) space.task_names.push_back(rule.name);

    std::map<std::int64_t, std::vector<VisitRecord>> by_patient;
    for (const VisitRecord& v : visits) by_patient[v.patient_id].push_back(v);

    auto chapter_bits = assign_category_labels(visits, dx_tree);
    for (auto& [pid, bits] : chapter_bits) {
        bits.reserve(space.task_names.size());
        for (const auto& rule : sorted_cohorts) {
            bits.push_back(evaluate_cohort_rule(by_patient.at(pid), rule) ? 1 : 0);
        }
        space.patient_labels[pid] = std::move(bits);
    }
    return space;
}

void push_down_labels(const std::map<std::int64_t, std::vector<std::uint8_t>>& patient_labels,
                      std::vector<VisitRecord>& visits) {
    for (VisitRecord& visit : visits) {
        auto it = patient_labels.find(visit.patient_id);
        if (it == patient_labels.end()) {
            throw MissingPatientLabels("no labels for patient " +
                                       std::to_string(visit.patient_id));
        }
        visit.labels = it->second;
    }
}

SplitResult split_patients(const std::vector<std::int64_t>& patient_ids, std::uint64_t seed) {
    std::vector<std::int64_t> ids = patient_ids;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw DataError("split_patients: duplicate patient id");
    }
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(ids);

    const std::size_t n = ids.size();
    const std::size_t n_valid = n / 10;
    const std::size_t n_test = n / 5;
    const std::size_t n_train = n - n_valid - n_test;

    SplitResult split;
    split.train.assign(ids.begin(), ids.begin() + n_train);
    split.valid.assign(ids.begin() + n_train, ids.begin() + n_train + n_valid);
    split.test.assign(ids.begin() + n_train + n_valid, ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.valid.begin(), split.valid.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

}  // namespace hbert
