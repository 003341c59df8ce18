#pragma once

#include <Eigen/Dense>

#include <string>

namespace clipcap {

// An image in the toy world: identifier plus its dense feature vector.
struct ImageRecord {
    std::string image_id;
    Eigen::VectorXd features;
};

}  // namespace clipcap
