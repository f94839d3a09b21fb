#
# vitrojan: data-free backdoor injection against small vision transformers
#
# See LICENSE.txt for license details.
#
from .version import VERSION
