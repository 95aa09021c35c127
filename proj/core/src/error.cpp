#include "somrs/error.hpp"

#include <utility>

namespace somrs {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::UnknownParent:
      return "UnknownParent";
    case Errc::DuplicateName:
      return "DuplicateName";
    case Errc::CycleDetected:
      return "CycleDetected";
    case Errc::ElementaryWithSubobjects:
      return "ElementaryWithSubobjects";
    case Errc::AbstractWithoutSubobjects:
      return "AbstractWithoutSubobjects";
    case Errc::InvalidAttribute:
      return "InvalidAttribute";
    case Errc::UnknownType:
      return "UnknownType";
    case Errc::UnknownObject:
      return "UnknownObject";
    case Errc::TypeViolationAfterApply:
      return "TypeViolationAfterApply";
    case Errc::SyntaxError:
      return "SyntaxError";
    case Errc::UnknownRelation:
      return "UnknownRelation";
    case Errc::UnknownAttribute:
      return "UnknownAttribute";
    case Errc::ArityMismatch:
      return "ArityMismatch";
    case Errc::OversizeMessage:
      return "OversizeMessage";
    case Errc::FrameError:
      return "FrameError";
    case Errc::MalformedDocument:
      return "MalformedDocument";
    case Errc::UnknownMessageType:
      return "UnknownMessageType";
    case Errc::VersionMismatch:
      return "VersionMismatch";
    case Errc::ProtocolViolation:
      return "ProtocolViolation";
    case Errc::DuplicateServiceId:
      return "DuplicateServiceId";
    case Errc::MalformedTemplate:
      return "MalformedTemplate";
    case Errc::MalformedFormula:
      return "MalformedFormula";
    case Errc::UnknownService:
      return "UnknownService";
    case Errc::NotLoaded:
      return "NotLoaded";
    case Errc::VersionConflict:
      return "VersionConflict";
    case Errc::VersionTooOld:
      return "VersionTooOld";
    case Errc::MalformedTask:
      return "MalformedTask";
    case Errc::NoPlanFound:
      return "NoPlanFound";
    case Errc::NoCandidates:
      return "NoCandidates";
    case Errc::AllRefusedOrTimedOut:
      return "AllRefusedOrTimedOut";
    case Errc::RecoveryExhausted:
      return "RecoveryExhausted";
    case Errc::UnknownTransaction:
      return "UnknownTransaction";
    case Errc::AlreadyTerminal:
      return "AlreadyTerminal";
    case Errc::InvalidWorld:
      return "InvalidWorld";
    case Errc::OutOfGripperRange:
      return "OutOfGripperRange";
    case Errc::ObjectMissing:
      return "ObjectMissing";
    case Errc::UnknownObjectInQuery:
      return "UnknownObjectInQuery";
    case Errc::MissingCapability:
      return "MissingCapability";
    case Errc::BadConfig:
      return "BadConfig";
    case Errc::PortInUse:
      return "PortInUse";
    case Errc::IoError:
      return "IoError";
  }
  return "Unknown";
}

bool parse_errc(std::string_view name, Errc& out) {
  static constexpr std::pair<std::string_view, Errc> kNames[] = {
    {"UnknownParent", Errc::UnknownParent},
    {"DuplicateName", Errc::DuplicateName},
    {"CycleDetected", Errc::CycleDetected},
    {"ElementaryWithSubobjects", Errc::ElementaryWithSubobjects},
    {"AbstractWithoutSubobjects", Errc::AbstractWithoutSubobjects},
    {"InvalidAttribute", Errc::InvalidAttribute},
    {"UnknownType", Errc::UnknownType},
    {"UnknownObject", Errc::UnknownObject},
    {"TypeViolationAfterApply", Errc::TypeViolationAfterApply},
    {"SyntaxError", Errc::SyntaxError},
    {"UnknownRelation", Errc::UnknownRelation},
    {"UnknownAttribute", Errc::UnknownAttribute},
    {"ArityMismatch", Errc::ArityMismatch},
    {"OversizeMessage", Errc::OversizeMessage},
    {"FrameError", Errc::FrameError},
    {"MalformedDocument", Errc::MalformedDocument},
    {"UnknownMessageType", Errc::UnknownMessageType},
    {"VersionMismatch", Errc::VersionMismatch},
    {"ProtocolViolation", Errc::ProtocolViolation},
    {"DuplicateServiceId", Errc::DuplicateServiceId},
    {"MalformedTemplate", Errc::MalformedTemplate},
    {"MalformedFormula", Errc::MalformedFormula},
    {"UnknownService", Errc::UnknownService},
    {"NotLoaded", Errc::NotLoaded},
    {"VersionConflict", Errc::VersionConflict},
    {"VersionTooOld", Errc::VersionTooOld},
    {"MalformedTask", Errc::MalformedTask},
    {"NoPlanFound", Errc::NoPlanFound},
    {"NoCandidates", Errc::NoCandidates},
    {"AllRefusedOrTimedOut", Errc::AllRefusedOrTimedOut},
    {"RecoveryExhausted", Errc::RecoveryExhausted},
    {"UnknownTransaction", Errc::UnknownTransaction},
    {"AlreadyTerminal", Errc::AlreadyTerminal},
    {"InvalidWorld", Errc::InvalidWorld},
    {"OutOfGripperRange", Errc::OutOfGripperRange},
    {"ObjectMissing", Errc::ObjectMissing},
    {"UnknownObjectInQuery", Errc::UnknownObjectInQuery},
    {"MissingCapability", Errc::MissingCapability},
    {"BadConfig", Errc::BadConfig},
    {"PortInUse", Errc::PortInUse},
    {"IoError", Errc::IoError}};
  for (const auto& [text, code] : kNames) {
    if (text == name) {
      out = code;
      return true;
    }
  }
  return false;
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

}  // namespace somrs
