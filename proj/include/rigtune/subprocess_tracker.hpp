// Bridge to an external black-box tracker running as a child process.
// Protocol: one line-delimited JSON exchange per track() call —
//   request:  {"theta_T": [...], "v": [...]}
//   response: {"c": [...]}
// Timeouts, process death, and malformed responses surface as TrackerError
// carrying an excerpt of the recent protocol transcript.
#pragma once

#include <rigtune/tracker.hpp>

#include <json.hpp>

#include <cerrno>
#include <csignal>
#include <cstring>
#include <deque>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

namespace rigtune {

class SubprocessTracker : public Tracker {
public:
    // Spawns `command` through /bin/sh. The declared dimensions are part of
    // the contract with the external tracker.
    SubprocessTracker(std::string command, int n_controls, int m_geometry,
                      int theta_size, int timeout_ms = 10000)
        : command_(std::move(command)),
          n_(n_controls),
          m_(m_geometry),
          theta_size_(theta_size),
          timeout_ms_(timeout_ms) {
        check_dim(n_ > 0 && m_ > 0 && theta_size_ > 0,
                  "SubprocessTracker: dimensions must be positive");
        spawn();
    }

    SubprocessTracker(const SubprocessTracker&) = delete;
    SubprocessTracker& operator=(const SubprocessTracker&) = delete;

    ~SubprocessTracker() override { shutdown(); }

    Vec track(const Vec& v, const Vec& theta_T) const override {
        check_dim(v.size() == m_, "SubprocessTracker: geometry size mismatch");
        check_dim(theta_T.size() == theta_size_, "SubprocessTracker: theta size mismatch");
        nlohmann::json request;
        request["theta_T"] = std::vector<double>(theta_T.data(), theta_T.data() + theta_T.size());
        request["v"] = std::vector<double>(v.data(), v.data() + v.size());
        const std::string line = request.dump() + "\n";
        log_line('>', request.dump());
        write_all(line);
        const std::string reply = read_line();
        log_line('<', reply);
        nlohmann::json response;
        try {
            response = nlohmann::json::parse(reply);
        } catch (const nlohmann::json::exception& e) {
            fail("malformed response: " + std::string(e.what()));
        }
        if (!response.is_object() || !response.contains("c") || !response["c"].is_array())
            fail("response missing control array");
        const auto& arr = response["c"];
        if (static_cast<int>(arr.size()) != n_)
            fail("control vector has wrong length");
        Vec c(n_);
        for (int i = 0; i < n_; ++i) {
            if (!arr[static_cast<std::size_t>(i)].is_number())
                fail("non-numeric control entry");
            c[i] = arr[static_cast<std::size_t>(i)].get<double>();
        }
        check_finite(c, "SubprocessTracker: non-finite controls");
        return c;
    }

    TrackerCaps caps() const override { return {false, false}; }
    int n_controls() const override { return n_; }
    int m_geometry() const override { return m_; }
    int theta_size() const override { return theta_size_; }

private:
    void spawn() {
        int to_child[2];
        int from_child[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0)
            throw TrackerError("SubprocessTracker: pipe() failed");
        pid_ = fork();
        if (pid_ < 0) throw TrackerError("SubprocessTracker: fork() failed");
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
        stdin_fd_ = to_child[1];
        stdout_fd_ = from_child[0];
    }

    void shutdown() {
        if (stdin_fd_ >= 0) close(stdin_fd_);
        if (stdout_fd_ >= 0) close(stdout_fd_);
        stdin_fd_ = stdout_fd_ = -1;
        if (pid_ > 0) {
            int status = 0;
            // Give the child a moment to exit on closed stdin, then insist.
            for (int i = 0; i < 50; ++i) {
                if (waitpid(pid_, &status, WNOHANG) == pid_) {
                    pid_ = -1;
                    return;
                }
                usleep(10000);
            }
            kill(pid_, SIGKILL);
            waitpid(pid_, &status, 0);
            pid_ = -1;
        }
    }

    void write_all(const std::string& data) const {
        std::size_t off = 0;
        while (off < data.size()) {
            const ssize_t n = ::write(stdin_fd_, data.data() + off, data.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                fail("write failed (tracker exited?)");
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line() const {
        while (true) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            pollfd pfd{stdout_fd_, POLLIN, 0};
            const int ready = poll(&pfd, 1, timeout_ms_);
            if (ready == 0)
                fail("timed out after " + std::to_string(timeout_ms_) + " ms");
            if (ready < 0) {
                if (errno == EINTR) continue;
                fail("poll failed");
            }
            char chunk[4096];
            const ssize_t n = ::read(stdout_fd_, chunk, sizeof(chunk));
            if (n < 0) {
                if (errno == EINTR) continue;
                fail("read failed");
            }
            if (n == 0) fail("tracker closed its output");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    // Last few protocol lines, each truncated, kept for error context.
    void log_line(char direction, const std::string& line) const {
        static constexpr std::size_t kMaxLine = 160;
        static constexpr std::size_t kMaxLines = 8;
        std::string entry;
        entry += direction;
        entry += ' ';
        entry += line.size() <= kMaxLine ? line : line.substr(0, kMaxLine) + "...";
        transcript_.push_back(std::move(entry));
        if (transcript_.size() > kMaxLines) transcript_.pop_front();
    }

    [[noreturn]] void fail(const std::string& reason) const {
        std::string message = "SubprocessTracker: " + reason;
        if (!transcript_.empty()) {
            message += "; transcript excerpt:";
            for (const std::string& entry : transcript_) message += "\n  " + entry;
        }
        throw TrackerError(message);
    }

    std::string command_;
    int n_;
    int m_;
    int theta_size_;
    int timeout_ms_;
    pid_t pid_ = -1;
    int stdin_fd_ = -1;
    int stdout_fd_ = -1;
    mutable std::string buffer_;
    mutable std::deque<std::string> transcript_;
};

}  // namespace rigtune
