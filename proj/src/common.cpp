#include "replkv/common.hpp"

namespace replkv {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDeviceFull: return "DeviceFull";
    case ErrorCode::kDoubleFree: return "DoubleFree";
    case ErrorCode::kOutOfBounds: return "OutOfBounds";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kCorruptRecord: return "CorruptRecord";
    case ErrorCode::kMissingMapping: return "MissingMapping";
    case ErrorCode::kIncompleteTransfer: return "IncompleteTransfer";
    case ErrorCode::kAlreadyFinalized: return "AlreadyFinalized";
    case ErrorCode::kBackupUnreachable: return "BackupUnreachable";
    case ErrorCode::kConnectionClosed: return "ConnectionClosed";
    case ErrorCode::kUnreachable: return "Unreachable";
    case ErrorCode::kRefused: return "Refused";
    case ErrorCode::kTimeout: return "Timeout";
    case ErrorCode::kBufferFull: return "BufferFull";
    case ErrorCode::kCoordinatorUnavailable: return "CoordinatorUnavailable";
    case ErrorCode::kNodeExists: return "NodeExists";
    case ErrorCode::kNoNode: return "NoNode";
    case ErrorCode::kServerUnreachable: return "ServerUnreachable";
    case ErrorCode::kNoSpareServer: return "NoSpareServer";
    case ErrorCode::kNoBackupAlive: return "NoBackupAlive";
    case ErrorCode::kZeroDataset: return "ZeroDataset";
    case ErrorCode::kZeroOps: return "ZeroOps";
    case ErrorCode::kConfig: return "Config";
    case ErrorCode::kProtocol: return "Protocol";
    case ErrorCode::kRedirect: return "Redirect";
  }
  return "Unknown";
}

}  // namespace replkv
