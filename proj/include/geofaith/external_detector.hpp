#pragma once

// Detector backed by a child process speaking a line protocol: one JSON
// request per step on stdin, one score per line on stdout. The reply is
// either a bare number or an object with a "score" member.

#include <csignal>
#include <cstdio>
#include <string>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "geofaith/faithfulness_pipeline.hpp"

namespace geofaith {

class ExternalProcessDetector final : public Detector {
 public:
  explicit ExternalProcessDetector(std::string command) : command_(std::move(command)) {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0) fail(ErrorCode::DetectorFailure, "pipe() failed");
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      fail(ErrorCode::DetectorFailure, "pipe() failed");
    }
    pid_ = fork();
    if (pid_ < 0) fail(ErrorCode::DetectorFailure, "fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_ = fdopen(to_child[1], "w");
    out_ = fdopen(from_child[0], "r");
    if (!in_ || !out_) fail(ErrorCode::DetectorFailure, "fdopen() failed");
    std::signal(SIGPIPE, SIG_IGN);
  }

  ExternalProcessDetector(const ExternalProcessDetector&) = delete;
  ExternalProcessDetector& operator=(const ExternalProcessDetector&) = delete;

  ~ExternalProcessDetector() override {
    if (in_) std::fclose(in_);
    if (out_) std::fclose(out_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  double score(const StepContext& ctx) override {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const auto& s : ctx.prefix) steps.push_back(s.text);
    const nlohmann::ordered_json request = {
        {"traj_id", ctx.trajectory_id},
        {"query", ctx.query},
        {"step", ctx.step()},
        {"steps", steps},
        {"features",
         {{"rho_local", ctx.features.rho_local},
          {"s_temp", ctx.features.s_temp},
          {"dfr_local", ctx.features.dfr_local},
          {"u_local", ctx.features.u_local}}}};
    const std::string line = request.dump() + "\n";
    if (std::fwrite(line.data(), 1, line.size(), in_) != line.size() || std::fflush(in_) != 0) {
      fail(ErrorCode::DetectorFailure, "external detector closed its input");
    }
    std::string reply;
    for (int c; (c = std::fgetc(out_)) != EOF && c != '\n';) reply.push_back(static_cast<char>(c));
    if (reply.empty()) fail(ErrorCode::DetectorFailure, "external detector produced no reply");
    double value = 0.0;
    try {
      const auto j = nlohmann::json::parse(reply);
      value = j.is_object() ? j.at("score").get<double>() : j.get<double>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorCode::DetectorFailure, "unparseable detector reply: " + reply);
    }
    if (!(value >= 0.0 && value <= 1.0)) fail(ErrorCode::DetectorFailure, "detector score outside [0, 1]: " + reply);
    return value;
  }

  std::string name() const override { return "external:" + command_; }

 private:
  std::string command_;
  pid_t pid_ = -1;
  FILE* in_ = nullptr;
  FILE* out_ = nullptr;
};

}  // namespace geofaith
