#include "cor/errors.hpp"

namespace cor {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NoStepsFound: return "NoStepsFound";
    case ErrorCode::MalformedQuestionBlock: return "MalformedQuestionBlock";
    case ErrorCode::MissingAnnotations: return "MissingAnnotations";
    case ErrorCode::MissingGold: return "MissingGold";
    case ErrorCode::TemplateError: return "TemplateError";
    case ErrorCode::PromptTooLong: return "PromptTooLong";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::AnswerParseError: return "AnswerParseError";
    case ErrorCode::FixtureMiss: return "FixtureMiss";
    case ErrorCode::HumanAborted: return "HumanAborted";
    case ErrorCode::JudgeParseError: return "JudgeParseError";
    case ErrorCode::ScoreOutOfRange: return "ScoreOutOfRange";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::Http: return "Http";
    case ErrorCode::Malformed: return "Malformed";
    case ErrorCode::UnreadableAttachment: return "UnreadableAttachment";
    case ErrorCode::NetworkForbidden: return "NetworkForbidden";
    case ErrorCode::Precondition: return "Precondition";
    case ErrorCode::Config: return "Config";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace cor
