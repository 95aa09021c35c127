#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace somrs {

/// Error kinds raised across the system. Each public operation documents the
/// subset it can raise; callers branch on Error::code().
enum class Errc {
  // ontology
  UnknownParent,
  DuplicateName,
  CycleDetected,
  ElementaryWithSubobjects,
  AbstractWithoutSubobjects,
  InvalidAttribute,
  UnknownType,
  UnknownObject,
  TypeViolationAfterApply,
  // entish
  SyntaxError,
  UnknownRelation,
  UnknownAttribute,
  ArityMismatch,
  // frp
  OversizeMessage,
  FrameError,
  MalformedDocument,
  UnknownMessageType,
  VersionMismatch,
  ProtocolViolation,
  // registry
  DuplicateServiceId,
  MalformedTemplate,
  MalformedFormula,
  UnknownService,
  // repository
  NotLoaded,
  VersionConflict,
  VersionTooOld,
  // planner / taskman
  MalformedTask,
  NoPlanFound,
  NoCandidates,
  AllRefusedOrTimedOut,
  RecoveryExhausted,
  UnknownTransaction,
  AlreadyTerminal,
  // simworld
  InvalidWorld,
  OutOfGripperRange,
  ObjectMissing,
  UnknownObjectInQuery,
  MissingCapability,
  // cli / io
  BadConfig,
  PortInUse,
  IoError,
};

std::string_view to_string(Errc code);

/// Parses a name produced by to_string(Errc); returns false when unknown.
bool parse_errc(std::string_view name, Errc& out);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);

  Errc code() const noexcept { return code_; }
  /// The message without the leading error name.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace somrs
