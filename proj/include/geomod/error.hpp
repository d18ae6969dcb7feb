#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace geomod {

// Root of every error thrown by the library. Subclasses map onto stable
// CLI exit codes (see exit_code_for in cli.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input data is malformed (bad record, bad coordinate, wrong arity...).
class DataError : public Error {
public:
    using Error::Error;
};

// A remote dependency (model endpoint, geocoder, storage) failed.
class ServiceError : public Error {
public:
    using Error::Error;
};

class InvalidCoordinate : public DataError {
public:
    using DataError::DataError;
};

class EmptyCandidateSet : public DataError {
public:
    EmptyCandidateSet() : DataError("candidate set is empty or has zero total weight") {}
};

class DegenerateCentroid : public DataError {
public:
    DegenerateCentroid() : DataError("weighted mean vector vanishes; centroid direction undefined") {}
};

class MalformedRecord : public DataError {
public:
    MalformedRecord(std::size_t line, const std::string& what)
        : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class MissingRequiredField : public DataError {
public:
    MissingRequiredField(std::size_t line, const std::string& field)
        : DataError("line " + std::to_string(line) + ": missing required field '" + field + "'"),
          line_(line), field_(field) {}
    std::size_t line() const noexcept { return line_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

class LengthMismatch : public DataError {
public:
    using DataError::DataError;
};

class UndefinedAtCountry : public DataError {
public:
    UndefinedAtCountry()
        : DataError("wrongly-withheld proportion is undefined at country granularity") {}
};

class EmptyQuery : public DataError {
public:
    EmptyQuery() : DataError("no queryable location fields") {}
};

class MissingAnnotation : public DataError {
public:
    using DataError::DataError;
};

class NoJsonFound : public DataError {
public:
    NoJsonFound() : DataError("no JSON object found in text") {}
};

class UnbalancedJson : public DataError {
public:
    UnbalancedJson() : DataError("JSON object braces are unbalanced") {}
};

class InvalidJson : public DataError {
public:
    using DataError::DataError;
};

class InvalidConfig : public DataError {
public:
    using DataError::DataError;
};

class UnknownConversation : public DataError {
public:
    using DataError::DataError;
};

class UnknownTurn : public DataError {
public:
    using DataError::DataError;
};

class TransportError : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class AuthError : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class GeocoderUnavailable : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class UpstreamUnavailable : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class StorageError : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class ModeratorError : public ServiceError {
public:
    using ServiceError::ServiceError;
};

class LtmParseError : public DataError {
public:
    using DataError::DataError;
};

}  // namespace geomod
