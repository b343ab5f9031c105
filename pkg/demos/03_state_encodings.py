"""
What the agent sees
===================

Two state encodings feed the actor network.  The E1 encoding is the pool
occupancy; the E2 encoding is a short history of past assignments, because
under a range-limited channel the occupancy of the whole area is not the
useful quantity.
"""
from docasched.rl import HistoryEntry, encode_e1, encode_e2, reward_e1, reward_e2

# Occupancy counts per TB -> {-1 free, 0 one user, 1 shared}.
counts = [1, 2, 0, 0, 2, 1, 1, 1, 1, 0]
print("occupancy", counts)
print("state    ", encode_e1(counts).tolist())

# E2: columns are past actions, oldest first.  Row 0 is the elapsed whole
# seconds until the next action, row 1 the direction of travel and row 2 the
# assigned TB.  The last column is the vehicle asking now.
history = [HistoryEntry(0.0, +1, 4), HistoryEntry(2.6, -1, 11), HistoryEntry(3.1, +1, 4)]
print("\nE2 state with K=6:")
print(encode_e2(history, direction=-1, now=4.0, k=6))

# Rewards: +10 once every transmission in the window reached 90% of the
# receivers, otherwise a penalty that grows with the worst PRR.  E2 also
# subtracts one point per TB left unused.
for worst in (1.0, 0.9, 0.7, 0.2):
    print(f"worst PRR {worst:.1f}: E1 reward {reward_e1([worst]):6.2f}   "
          f"E2 reward with 3 idle TBs {reward_e2([worst], 3):6.2f}")
