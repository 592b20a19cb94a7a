#pragma once

#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pforge/faceio.hpp"

namespace pforge {

/// Wire messages of the newline-delimited JSON protocol spoken with an
/// external face-analysis process over its stdin / stdout.
///
///   request:  {"id":n,"op":"detect"|"embed","image_png_b64":"...","landmarks":[[x,y],...]}
///   response: {"id":n,"ok":true,"faces":[{"bbox":[l,t,w,h],"landmarks":[[x,y],...],"confidence":c}]}
///             {"id":n,"ok":true,"embedding":[...]}
///             {"id":n,"ok":false,"error":"..."}
struct BackendRequest {
  long id = 0;
  std::string op;
  std::string image_png_b64;
  std::optional<Landmarks> landmarks;

  std::string encode() const;
  static BackendRequest decode(std::string_view line);
};

struct BackendResponse {
  long id = 0;
  bool ok = false;
  std::optional<std::vector<FaceRecord>> faces;
  std::optional<std::vector<double>> embedding;
  std::optional<std::string> error;

  std::string encode() const;
  /// Throws protocol_error on malformed input.
  static BackendResponse decode(std::string_view line);
};

/// Child process connected through pipes; spawned with /bin/sh -c.
class ChildProcess {
 public:
  explicit ChildProcess(const std::string& command);
  ~ChildProcess();
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  void write_line(const std::string& line);
  /// Throws backend_error on timeout or EOF.
  std::string read_line(std::chrono::milliseconds timeout);
  bool alive() const noexcept { return pid_ > 0; }
  void terminate();

 private:
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

/// Serializes requests per process; up to pool_size processes serve callers
/// concurrently. A process that times out or breaks protocol is killed and
/// respawned on next use.
class ExternalProcessBackend : public FaceBackend {
 public:
  ExternalProcessBackend(std::string command, std::chrono::milliseconds timeout, int pool_size = 1);
  ~ExternalProcessBackend() override;

  std::vector<FaceRecord> detect(const ImageBuffer& img) override;
  Embedding embed(const ImageBuffer& aligned, const Landmarks& landmarks) override;

  BackendResponse call(BackendRequest request);

 private:
  struct Slot {
    std::unique_ptr<ChildProcess> process;
    bool busy = false;
  };

  std::string command_;
  std::chrono::milliseconds timeout_;
  std::mutex mutex_;
  std::condition_variable available_;
  std::vector<Slot> slots_;
  long next_id_ = 1;
};

}  // namespace pforge
