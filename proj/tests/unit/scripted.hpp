#pragma once

#include <doctest.h>

#include <cstdint>
#include <deque>
#include <initializer_list>

// Random source that replays a fixed list of draws and checks each one
// against the requested inclusive bounds.
class Scripted {
public:
    Scripted(std::initializer_list<std::int64_t> draws) : draws_(draws) {}

    std::int64_t randint(std::int64_t lo, std::int64_t hi) {
        REQUIRE_FALSE(draws_.empty());
        const std::int64_t v = draws_.front();
        draws_.pop_front();
        CHECK(v >= lo);
        CHECK(v <= hi);
        return v;
    }

    bool exhausted() const { return draws_.empty(); }

private:
    std::deque<std::int64_t> draws_;
};
