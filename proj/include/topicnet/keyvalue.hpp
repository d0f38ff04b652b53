#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace topicnet {

// UTF-8 "key=value" lines; "#" starts a comment, blank lines are skipped, surrounding
// whitespace is trimmed. Duplicate keys keep the last value. `source` names the input in errors.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& source);

std::string trim(const std::string& s);
std::vector<std::string> split_list(const std::string& s, char sep = ',');

}  // namespace topicnet
