#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hbert/ontology.hpp"

namespace hbert {

// One raw coded event before visit grouping.
struct EventRecord {
    std::int64_t patient_id = 0;
    std::int32_t date = 0;  // day index, >= 0
    SystemId system = SystemId::kDiagnosis;
    std::string code;
};

// One calendar day of a patient's records after grouping and filtering.
struct VisitRecord {
    std::int64_t patient_id = 0;
    std::int32_t date = 0;
    std::set<std::string> dx_codes;
    std::set<std::string> rx_codes;
    std::vector<std::uint8_t> labels;  // one bit per task; empty until push-down
};

// Conditional inclusion/exclusion logic defining one patient cohort.
struct CohortRule {
    std::string name;
    std::set<std::string> inclusive_dx;
    std::size_t dx_min_count = 1;
    std::set<std::string> inclusive_rx;
    std::size_t rx_min_count = 1;
    std::set<std::string> exclusive_rx;

    void validate() const;
};

// Latent condition driving code emissions for its member patients.
struct PhenotypeSpec {
    std::string name;
    double prevalence = 0.0;  // (0, 1]
    std::vector<std::pair<std::string, double>> dx_emission;  // sums to 1
    std::vector<std::pair<std::string, double>> rx_emission;  // sums to 1
    double visit_rate = 1.0;  // mean visits per member patient

    void validate() const;
};

// Population-level knobs that are not per-phenotype.
struct GenPolicy {
    std::int32_t days = 365;
    double dx_per_visit_mean = 1.2;  // Poisson; zero-dx days exercise the visit filter
    double rx_per_visit_mean = 0.9;
};

// Deterministic event stream: every patient joins each phenotype independently
// by prevalence and always carries the background phenotype; each membership
// contributes Poisson(visit_rate) dated visits worth of events.
std::vector<EventRecord> generate_population(const std::vector<PhenotypeSpec>& specs,
                                             const PhenotypeSpec& background,
                                             std::size_t n_patients, std::uint64_t seed,
                                             const GenPolicy& policy = GenPolicy());

// Groups events into per-day visits and keeps only those with at least one
// diagnosis and at least one prescription code. Labels are left empty.
std::vector<VisitRecord> group_and_filter_visits(const std::vector<EventRecord>& events);

// "Ever had a diagnosis in this chapter" bit per depth-2 diagnosis token,
// chapter order = lexicographic.
std::map<std::int64_t, std::vector<std::uint8_t>> assign_category_labels(
    const std::vector<VisitRecord>& visits, const HierarchyTree& dx_tree);

// True when inclusive diagnosis/prescription occurrence counts, accumulated
// across the patient's visits, reach their minimums and no exclusive
// prescription ever appears.
bool evaluate_cohort_rule(const std::vector<VisitRecord>& patient_visits, const CohortRule& rule);

// Chapter bits followed by cohort bits (cohorts sorted by name), per patient.
struct LabelSpace {
    std::vector<std::string> task_names;  // chapters sorted, then cohort names sorted
    std::size_t n_chapters = 0;
    std::map<std::int64_t, std::vector<std::uint8_t>> patient_labels;
};

LabelSpace build_patient_labels(const std::vector<VisitRecord>& visits,
                                const HierarchyTree& dx_tree,
                                const std::vector<CohortRule>& cohorts);

// Copies each patient's bitvector onto every one of that patient's visits.
void push_down_labels(const std::map<std::int64_t, std::vector<std::uint8_t>>& patient_labels,
                      std::vector<VisitRecord>& visits);

struct SplitResult {
    std::vector<std::int64_t> train, valid, test;
};

// Patient-level 70:10:20 partition; floors for valid/test, remainder to train.
SplitResult split_patients(const std::vector<std::int64_t>& patient_ids, std::uint64_t seed);

}  // namespace hbert
