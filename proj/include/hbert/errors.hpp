#pragma once

#include <stdexcept>
#include <string>

namespace hbert {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad invocation: unusable flags, malformed option values. CLI exit code 1.
struct UsageError : Error {
    using Error::Error;
};

// Bad or inconsistent input data (files, hierarchies, datasets). CLI exit code 2.
struct DataError : Error {
    using Error::Error;
};

// Numeric or shape failures inside the math stack. CLI exit code 3.
struct NumericError : Error {
    using Error::Error;
};

// --- ontology ---
struct CycleDetected final : DataError {
    using DataError::DataError;
};
struct MultipleRoots final : DataError {
    using DataError::DataError;
};
struct OrphanToken final : DataError {
    using DataError::DataError;
};
struct DuplicateChildLine final : DataError {
    using DataError::DataError;
};
struct UnknownCode final : DataError {
    using DataError::DataError;
};
struct EmptyVisit final : DataError {
    using DataError::DataError;
};

// --- synthdata ---
struct NoPhenotypes final : DataError {
    using DataError::DataError;
};
struct MissingPatientLabels final : DataError {
    using DataError::DataError;
};
struct InvalidSpec final : DataError {
    using DataError::DataError;
};

// --- tensor ---
struct ShapeMismatch final : NumericError {
    using NumericError::NumericError;
};
struct AllMaskedRow final : NumericError {
    using NumericError::NumericError;
};
struct IdOutOfRange final : NumericError {
    using NumericError::NumericError;
};
struct NonScalarLoss final : NumericError {
    using NumericError::NumericError;
};

// --- model ---
struct IsolatedNode final : NumericError {
    using NumericError::NumericError;
};

// --- train ---
struct MissingGrad final : NumericError {
    using NumericError::NumericError;
};
struct EmptyDataset final : DataError {
    using DataError::DataError;
};
struct TaskCountMismatch final : DataError {
    using DataError::DataError;
};
struct MissingCheckpoint final : DataError {
    using DataError::DataError;
};
struct VariantMismatch final : DataError {
    using DataError::DataError;
};
struct CheckpointCorrupt final : DataError {
    using DataError::DataError;
};

// --- eval ---
struct NoDefinedTasks final : NumericError {
    using NumericError::NumericError;
};
struct NoVisits final : DataError {
    using DataError::DataError;
};
struct DegenerateData final : NumericError {
    using NumericError::NumericError;
};
struct EmptyGroup final : NumericError {
    using NumericError::NumericError;
};

}  // namespace hbert
