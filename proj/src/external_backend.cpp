#include "pforge/external_backend.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "pforge/imageio.hpp"

namespace pforge {

using ojson = nlohmann::ordered_json;

namespace {

ojson landmarks_json(const Landmarks& lm) {
  ojson arr = ojson::array();
  for (const auto& p : lm) arr.push_back({p.x(), p.y()});
  return arr;
}

Landmarks landmarks_from(const ojson& j) {
  if (!j.is_array() || j.size() != 5) throw std::invalid_argument("landmarks must be five [x, y] pairs");
  Landmarks lm;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& p = j[i];
    if (!p.is_array() || p.size() != 2) throw std::invalid_argument("landmark must be [x, y]");
    lm[i] = {p[0].get<double>(), p[1].get<double>()};
  }
  return lm;
}

ojson face_json(const FaceRecord& f) {
  ojson j;
  j["bbox"] = {f.bbox.left, f.bbox.top, f.bbox.width, f.bbox.height};
  j["landmarks"] = landmarks_json(f.landmarks);
  j["confidence"] = f.confidence;
  if (f.embedding) j["embedding"] = std::vector<double>(f.embedding->data(), f.embedding->data() + f.embedding->size());
  if (f.yaw_deg) j["yaw_deg"] = *f.yaw_deg;
  return j;
}

FaceRecord face_from(const ojson& j) {
  FaceRecord f;
  const auto& b = j.at("bbox");
  if (!b.is_array() || b.size() != 4) throw std::invalid_argument("bbox must be [l, t, w, h]");
  f.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  f.landmarks = landmarks_from(j.at("landmarks"));
  f.confidence = j.at("confidence").get<double>();
  if (f.confidence < 0.0 || f.confidence > 1.0) throw std::invalid_argument("confidence outside [0, 1]");
  if (j.contains("embedding")) {
    const auto v = j.at("embedding").get<std::vector<double>>();
    f.embedding = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (j.contains("yaw_deg")) f.yaw_deg = j.at("yaw_deg").get<double>();
  return f;
}

template <typename F>
auto parse_or_protocol_error(std::string_view line, F&& body) {
  try {
    return body(ojson::parse(line));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorKind::protocol_error, std::string("malformed backend message: ") + e.what());
  }
}

}  // namespace

std::string BackendRequest::encode() const {
  ojson j;
  j["id"] = id;
  j["op"] = op;
  j["image_png_b64"] = image_png_b64;
  if (landmarks) j["landmarks"] = landmarks_json(*landmarks);
  return j.dump();
}

BackendRequest BackendRequest::decode(std::string_view line) {
  return parse_or_protocol_error(line, [](const ojson& j) {
    BackendRequest r;
    r.id = j.at("id").get<long>();
    r.op = j.at("op").get<std::string>();
    if (r.op != "detect" && r.op != "embed") throw std::invalid_argument("unknown op " + r.op);
    r.image_png_b64 = j.at("image_png_b64").get<std::string>();
    if (j.contains("landmarks")) r.landmarks = landmarks_from(j.at("landmarks"));
    return r;
  });
}

std::string BackendResponse::encode() const {
  ojson j;
  j["id"] = id;
  j["ok"] = ok;
  if (faces) {
    j["faces"] = ojson::array();
    for (const auto& f : *faces) j["faces"].push_back(face_json(f));
  }
  if (embedding) j["embedding"] = *embedding;
  if (error) j["error"] = *error;
  return j.dump();
}

BackendResponse BackendResponse::decode(std::string_view line) {
  return parse_or_protocol_error(line, [](const ojson& j) {
    BackendResponse r;
    r.id = j.at("id").get<long>();
    r.ok = j.at("ok").get<bool>();
    if (j.contains("faces")) {
      r.faces.emplace();
      for (const auto& f : j.at("faces")) r.faces->push_back(face_from(f));
    }
    if (j.contains("embedding")) r.embedding = j.at("embedding").get<std::vector<double>>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    if (!r.ok && !r.error) throw std::invalid_argument("failed response without error text");
    return r;
  });
}

ChildProcess::ChildProcess(const std::string& command) {
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0) fail(ErrorKind::backend_error, "pipe: " + std::string(std::strerror(errno)));
  if (pipe(out_pipe) != 0) {
    close(in_pipe[0]);
    close(in_pipe[1]);
    fail(ErrorKind::backend_error, "pipe: " + std::string(std::strerror(errno)));
  }
  const pid_t pid = fork();
  if (pid < 0) fail(ErrorKind::backend_error, "fork: " + std::string(std::strerror(errno)));
  if (pid == 0) {
    setpgid(0, 0);
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  setpgid(pid, pid);
  close(in_pipe[0]);
  close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  fcntl(from_child_, F_SETFD, FD_CLOEXEC);
}

ChildProcess::~ChildProcess() { terminate(); }

void ChildProcess::terminate() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    kill(-pid_, SIGKILL);
    kill(pid_, SIGKILL);
    waitpid(pid_, nullptr, 0);
  }
  pid_ = -1;
}

void ChildProcess::write_line(const std::string& line) {
  std::string data = line + "\n";
  const char* p = data.data();
  std::size_t left = data.size();
  // Ignore SIGPIPE from a dead child.
  std::signal(SIGPIPE, SIG_IGN);
  while (left > 0) {
    const ssize_t n = write(to_child_, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::backend_error, "write to backend process: " + std::string(std::strerror(errno)));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

std::string ChildProcess::read_line(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    const auto remaining =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (remaining.count() <= 0) fail(ErrorKind::backend_error, "backend process timed out");
    pollfd pfd{from_child_, POLLIN, 0};
    const int ready = poll(&pfd, 1, static_cast<int>(remaining.count()));
    if (ready < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::backend_error, "poll: " + std::string(std::strerror(errno)));
    }
    if (ready == 0) fail(ErrorKind::backend_error, "backend process timed out");
    char chunk[65536];
    const ssize_t n = read(from_child_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) fail(ErrorKind::backend_error, "backend process closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

ExternalProcessBackend::ExternalProcessBackend(std::string command, std::chrono::milliseconds timeout, int pool_size)
    : command_(std::move(command)), timeout_(timeout) {
  slots_.resize(static_cast<std::size_t>(std::max(1, pool_size)));
}

ExternalProcessBackend::~ExternalProcessBackend() = default;

BackendResponse ExternalProcessBackend::call(BackendRequest request) {
  std::unique_lock lock(mutex_);
  available_.wait(lock, [&] {
    return std::any_of(slots_.begin(), slots_.end(), [](const Slot& s) { return !s.busy; });
  });
  auto slot = std::find_if(slots_.begin(), slots_.end(), [](const Slot& s) { return !s.busy; });
  slot->busy = true;
  request.id = next_id_++;
  lock.unlock();

  auto release = [&](bool broken) {
    std::lock_guard guard(mutex_);
    if (broken) slot->process.reset();
    slot->busy = false;
    available_.notify_one();
  };

  BackendResponse response;
  try {
    if (!slot->process) slot->process = std::make_unique<ChildProcess>(command_);
    slot->process->write_line(request.encode());
    response = BackendResponse::decode(slot->process->read_line(timeout_));
    if (response.id != request.id)
      fail(ErrorKind::protocol_error, "response id " + std::to_string(response.id) + " does not match request " +
                                          std::to_string(request.id));
  } catch (const Error& e) {
    release(true);
    fail(ErrorKind::backend_error, e.what());
  }
  release(false);
  if (!response.ok) fail(ErrorKind::backend_error, "backend reported: " + response.error.value_or(""));
  return response;
}

std::vector<FaceRecord> ExternalProcessBackend::detect(const ImageBuffer& img) {
  BackendRequest req;
  req.op = "detect";
  req.image_png_b64 = png_base64(img);
  auto response = call(std::move(req));
  if (!response.faces) fail(ErrorKind::backend_error, "detect response without faces");
  return *response.faces;
}

Embedding ExternalProcessBackend::embed(const ImageBuffer& aligned, const Landmarks& landmarks) {
  BackendRequest req;
  req.op = "embed";
  req.image_png_b64 = png_base64(aligned);
  req.landmarks = landmarks;
  auto response = call(std::move(req));
  if (!response.embedding || response.embedding->empty())
    fail(ErrorKind::backend_error, "embed response without embedding");
  return Eigen::Map<const Eigen::VectorXd>(response.embedding->data(),
                                           static_cast<Eigen::Index>(response.embedding->size()));
}

}  // namespace pforge
