#pragma once

#include <stdexcept>
#include <string>

namespace clipcap {

// Base for every error the library raises. The kind() string is stable and
// used by the CLI when reporting failures.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CLIPCAP_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& message) : Error(#Name, message) {}    \
    }

// textproc
CLIPCAP_DEFINE_ERROR(EmptyText);
CLIPCAP_DEFINE_ERROR(EmptyCorpus);
CLIPCAP_DEFINE_ERROR(CaptionTooShort);
// dual_encoder
CLIPCAP_DEFINE_ERROR(DimensionMismatch);
CLIPCAP_DEFINE_ERROR(ZeroEmbedding);
CLIPCAP_DEFINE_ERROR(BatchTooSmall);
// captioner
CLIPCAP_DEFINE_ERROR(PrefixTooLong);
CLIPCAP_DEFINE_ERROR(CaptionTooLong);
// rl_trainer / metrics
CLIPCAP_DEFINE_ERROR(MissingReferences);
CLIPCAP_DEFINE_ERROR(CorpusTooSmall);
CLIPCAP_DEFINE_ERROR(MissingPrediction);
// data_io / cli
CLIPCAP_DEFINE_ERROR(ConfigInvalid);
CLIPCAP_DEFINE_ERROR(ParseError);
CLIPCAP_DEFINE_ERROR(EmptyEntry);
CLIPCAP_DEFINE_ERROR(IoError);

#undef CLIPCAP_DEFINE_ERROR

}  // namespace clipcap
